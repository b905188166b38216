"""Concept codebook learning: VAE pretraining, K-Means initialization and
VQ-VAE fine-tuning over per-atom local environments.

The encoder sees one local environment at a time (attention never crosses
environment boundaries); the decoder attends over all atoms of a crystal and
emits species logits and Cartesian coordinates per atom plus one lattice
6-vector per crystal from a mean-pooled head.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import nn

from .backbone import Backbone, masked_mean
from .crystal import (
    COORD_SLICE,
    LATTICE_SLICE,
    NUM_SPECIES,
    SPECIES_SLICE,
    Crystal,
    canonicalize,
    find_local_environment,
    lattice_from_hat,
    lattice_hat_of,
)
from .errors import ConfigError, DecodeFailed, InsufficientData, NumericalError
from .matcher import MatcherConfig, structures_match
from .training import check_finite, minibatches, torch_generator

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
LENGTH_SCALE = 5.0
# relative coordinates (3), distance (1), species (100), lattice (6), pad flag (1)
ENV_FEATURES = 3 + 1 + NUM_SPECIES + 6 + 1


@dataclass(frozen=True)
class CodebookConfig:
    codebook_size: int = 10_000
    latent_dim: int = 8
    layers: int = 8
    hidden: int = 512
    heads: int = 8
    dropout: float = 0.0
    vae_reg_weight: float = 1e-5
    vqvae_reg_weight: float = 1e-2
    xi: float = 1.1
    max_neighbors: int = 12
    max_atoms: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 64
    vae_epochs: int = 50
    vqvae_epochs: int = 50
    kmeans_max_iter: int = 300

    def __post_init__(self):
        if self.codebook_size < 2 or self.latent_dim < 1:
            raise ConfigError("need codebook_size >= 2 and latent_dim >= 1")
        if min(self.vae_reg_weight, self.vqvae_reg_weight) < 0:
            raise ConfigError("regularization weights must be non-negative")
        if self.xi < 1 or self.max_neighbors < 1:
            raise ConfigError("need xi >= 1 and max_neighbors >= 1")


@dataclass(frozen=True, eq=False)
class Codebook:
    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2 or not np.all(np.isfinite(codes)):
            raise NumericalError("codebook must be a finite T x d matrix")
        object.__setattr__(self, "codes", codes)

    @property
    def size(self):
        return self.codes.shape[0]


@dataclass(frozen=True)
class LatentAssignment:
    z: np.ndarray
    code_index: int
    distance: float


def squared_distances(z, codes):
    """``||z_i - e_t||^2`` for every latent row and code, shape ``(M, T)``."""
    z = np.atleast_2d(z)
    return ((z[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)


def quantize(z, codebook):
    """Nearest code under squared Euclidean distance; ties go to the lowest index."""
    z = np.asarray(z)
    codes = codebook.codes if isinstance(codebook, Codebook) else np.asarray(codebook)
    if z.shape != (codes.shape[1],):
        raise ConfigError(f"latent of shape {z.shape} for codes of dimension {codes.shape[1]}")
    if not np.all(np.isfinite(z)):
        raise NumericalError("latent contains non-finite values")
    d = squared_distances(z, codes)[0]
    t = int(np.argmin(d))
    return LatentAssignment(z, t, float(d[t]))


def quantize_rows(Z, codes):
    """Vectorized :func:`quantize` over the rows of ``Z``: (indices, distances)."""
    Z = np.asarray(Z)
    if not np.all(np.isfinite(Z)):
        raise NumericalError("latent contains non-finite values")
    d = squared_distances(Z, codes)
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(idx)), idx]


def environment_features(rows, pad_mask):
    """Encoder input features for a stack of environments.

    Coordinates enter relative to the center atom so that a concept describes
    local geometry, not where in the cell the atom sits.
    """
    rows = np.asarray(rows, dtype=np.float64)
    pad = np.asarray(pad_mask, dtype=bool)
    rel = rows[..., COORD_SLICE] - rows[..., :1, COORD_SLICE]
    rel[pad] = 0.0
    dist = np.linalg.norm(rel, axis=-1, keepdims=True)
    return np.concatenate(
        [rel / LENGTH_SCALE, dist / LENGTH_SCALE, rows[..., SPECIES_SLICE],
         rows[..., LATTICE_SLICE] / LENGTH_SCALE, pad[..., None].astype(np.float64)],
        axis=-1,
    )


@dataclass
class EnvironmentTensors:
    """Flattened per-atom environments for a list of canonicalized crystals."""

    crystals: list
    features: torch.Tensor
    pad: torch.Tensor
    species: torch.Tensor
    coords: torch.Tensor
    lattice_hat: torch.Tensor
    offsets: torch.Tensor
    environments: list = field(default_factory=list, repr=False)

    @property
    def num_crystals(self):
        return len(self.crystals)

    def atom_index(self, crystal_idx):
        """Flattened atom indices plus per-atom (batch slot, position)."""
        counts = self.offsets[crystal_idx + 1] - self.offsets[crystal_idx]
        atoms = torch.cat([torch.arange(self.offsets[i], self.offsets[i + 1]) for i in crystal_idx.tolist()])
        slot = torch.repeat_interleave(torch.arange(len(crystal_idx)), counts)
        pos = torch.cat([torch.arange(int(n)) for n in counts])
        return atoms, slot, pos, int(counts.max())


def prepare_environments(crystals, xi=1.1, max_neighbors=12, keep_environments=False):
    canon = [canonicalize(c) for c in crystals]
    feats, pads, species, coords, hats, envs = [], [], [], [], [], []
    offsets = [0]
    for c in canon:
        local = [find_local_environment(c, i, xi, max_neighbors) for i in range(c.num_atoms)]
        rows = np.stack([e.rows for e in local])
        pad = np.stack([e.pad_mask for e in local])
        feats.append(environment_features(rows, pad))
        pads.append(pad)
        species.append(c.atomic_numbers - 1)
        coords.append(c.cart_coords)
        hats.append(lattice_hat_of(c.lattice))
        offsets.append(offsets[-1] + c.num_atoms)
        if keep_environments:
            envs.extend(local)
    return EnvironmentTensors(
        crystals=canon,
        features=torch.as_tensor(np.concatenate(feats), dtype=torch.float32),
        pad=torch.as_tensor(np.concatenate(pads)),
        species=torch.as_tensor(np.concatenate(species), dtype=torch.long),
        coords=torch.as_tensor(np.concatenate(coords), dtype=torch.float32),
        lattice_hat=torch.as_tensor(np.stack(hats), dtype=torch.float32),
        offsets=torch.as_tensor(offsets, dtype=torch.long),
        environments=envs,
    )


class EnvironmentEncoder(nn.Module):
    """Maps one ``(1+K)``-row environment to ``(mu, log_sigma)`` of its latent."""

    def __init__(self, cfg):
        super().__init__()
        self.inp = nn.Linear(ENV_FEATURES, cfg.hidden)
        self.backbone = Backbone(cfg.hidden, cfg.layers, cfg.heads, max_len=1 + cfg.max_neighbors, dropout=cfg.dropout)
        self.head = nn.Linear(cfg.hidden, 2 * cfg.latent_dim)

    def forward(self, features, pad):
        h = self.backbone(self.inp(features), pad_mask=pad)
        mu, log_sigma = self.head(h[:, 0]).chunk(2, dim=-1)
        return mu, log_sigma


class CrystalDecoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.inp = nn.Linear(cfg.latent_dim, cfg.hidden)
        self.backbone = Backbone(cfg.hidden, cfg.layers, cfg.heads, max_len=cfg.max_atoms, dropout=cfg.dropout)
        self.species = nn.Linear(cfg.hidden, NUM_SPECIES)
        self.coords = nn.Linear(cfg.hidden, 3)
        self.lattice = nn.Sequential(nn.Linear(cfg.hidden, cfg.hidden), nn.GELU(), nn.Linear(cfg.hidden, 6))

    def forward(self, codes, pad=None):
        h = self.backbone(self.inp(codes), pad_mask=pad)
        pooled = masked_mean(h, pad)
        return self.species(h), LENGTH_SCALE * self.coords(h), LENGTH_SCALE * self.lattice(pooled)


@dataclass
class DecoderOutput:
    logits: torch.Tensor
    coords: torch.Tensor
    lattice_hat: torch.Tensor


@dataclass
class CrystalTargets:
    species: torch.Tensor
    coords: torch.Tensor
    lattice_hat: torch.Tensor
    pad: torch.Tensor


def _per_crystal_mean(values, pad):
    live = (~pad).to(values.dtype)
    return ((values * live).sum(dim=1) / live.sum(dim=1)).mean()


def _reconstruction_terms(targets, out):
    b, m = targets.species.shape
    ce = F.cross_entropy(out.logits.reshape(b * m, -1), targets.species.reshape(-1), reduction="none").reshape(b, m)
    loss_a = _per_crystal_mean(ce, targets.pad)
    loss_x = _per_crystal_mean(((targets.coords - out.coords) ** 2).sum(-1), targets.pad)
    loss_l = ((targets.lattice_hat - out.lattice_hat) ** 2).sum(-1).mean()
    return loss_a, loss_x, loss_l


def vqvae_loss(targets, out, z, e, reg_weight):
    """Reconstruction terms plus codebook and commitment terms with stop-gradients."""
    loss_a, loss_x, loss_l = _reconstruction_terms(targets, out)
    codebook_term = ((z.detach() - e) ** 2).sum(-1)
    commitment = ((z - e.detach()) ** 2).sum(-1)
    loss_reg = _per_crystal_mean(codebook_term + commitment, targets.pad)
    total = loss_a + loss_x + loss_l + reg_weight * loss_reg
    return {"L_A": loss_a, "L_X": loss_x, "L_L": loss_l, "L_reg": loss_reg, "total": total}


def gaussian_kl(mu, log_sigma):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the latent dimension."""
    return 0.5 * (mu ** 2 + torch.exp(2 * log_sigma) - 1.0 - 2 * log_sigma).sum(-1)


def vae_stage_loss(targets, out, mu, log_sigma, reg_weight):
    loss_a, loss_x, loss_l = _reconstruction_terms(targets, out)
    loss_kl = _per_crystal_mean(gaussian_kl(mu, log_sigma), targets.pad)
    total = loss_a + loss_x + loss_l + reg_weight * loss_kl
    return {"L_A": loss_a, "L_X": loss_x, "L_L": loss_l, "L_KL": loss_kl, "total": total}


def kmeans_init(latents, n_codes, seed, max_iter=300):
    """Lloyd's algorithm with k-means++ seeding; centroids become the codebook."""
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) < n_codes:
        raise InsufficientData(f"{len(latents)} latents for {n_codes} codes")
    if len(np.unique(latents, axis=0)) < n_codes:
        raise InsufficientData(f"fewer than {n_codes} distinct latents")
    km = KMeans(n_clusters=n_codes, init="k-means++", n_init=1, max_iter=max_iter,
                random_state=seed, algorithm="lloyd")
    km.fit(latents)
    centers = km.cluster_centers_
    if len(np.unique(centers, axis=0)) < n_codes:
        raise InsufficientData("K-Means produced duplicate centroids")
    return Codebook(centers)


def _scatter(values, slot, pos, batch, width):
    out = values.new_zeros((batch, width) + values.shape[1:])
    out[slot, pos] = values
    return out


class ConceptVQVAE(nn.Module):
    """Encoder, decoder and codebook, plus numpy-facing helpers."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = EnvironmentEncoder(cfg)
        self.decoder = CrystalDecoder(cfg)
        self.codebook = nn.Parameter(torch.zeros(cfg.codebook_size, cfg.latent_dim))
        self.provenance = {}

    # -- batched forward passes used by training -------------------------
    def _batch(self, envs, crystal_idx):
        atoms, slot, pos, width = envs.atom_index(crystal_idx)
        b = len(crystal_idx)
        pad = torch.ones(b, width, dtype=torch.bool)
        pad[slot, pos] = False
        targets = CrystalTargets(
            species=_scatter(envs.species[atoms], slot, pos, b, width),
            coords=_scatter(envs.coords[atoms], slot, pos, b, width),
            lattice_hat=envs.lattice_hat[crystal_idx],
            pad=pad,
        )
        return atoms, slot, pos, width, targets

    def nearest_codes(self, z):
        d = ((z[:, None, :] - self.codebook[None, :, :]) ** 2).sum(-1)
        idx = d.argmin(dim=1)
        return idx, self.codebook[idx]

    def vae_step(self, envs, crystal_idx, generator):
        atoms, slot, pos, width, targets = self._batch(envs, crystal_idx)
        mu, log_sigma = self.encoder(envs.features[atoms], envs.pad[atoms])
        z = mu + torch.exp(log_sigma) * torch.randn(mu.shape, generator=generator)
        b = len(crystal_idx)
        out = DecoderOutput(*self.decoder(_scatter(z, slot, pos, b, width), targets.pad))
        return vae_stage_loss(targets, out, _scatter(mu, slot, pos, b, width),
                              _scatter(log_sigma, slot, pos, b, width), self.cfg.vae_reg_weight)

    def vq_step(self, envs, crystal_idx):
        atoms, slot, pos, width, targets = self._batch(envs, crystal_idx)
        z, _ = self.encoder(envs.features[atoms], envs.pad[atoms])
        _, e = self.nearest_codes(z.detach())
        z_q = z + (e - z).detach()
        b = len(crystal_idx)
        out = DecoderOutput(*self.decoder(_scatter(z_q, slot, pos, b, width), targets.pad))
        return vqvae_loss(targets, out, _scatter(z, slot, pos, b, width),
                          _scatter(e, slot, pos, b, width), self.cfg.vqvae_reg_weight)

    # -- numpy-facing inference helpers -----------------------------------
    @torch.no_grad()
    def encode_environments(self, envs, chunk=4096):
        """Pre-quantization latents (the encoder mean) for every atom in ``envs``."""
        out = []
        for start in range(0, len(envs.features), chunk):
            mu, _ = self.encoder(envs.features[start:start + chunk], envs.pad[start:start + chunk])
            out.append(mu)
        if not out:
            return np.zeros((0, self.cfg.latent_dim), dtype=np.float32)
        return torch.cat(out).numpy()

    def prepare(self, crystals, keep_environments=False):
        return prepare_environments(crystals, self.cfg.xi, self.cfg.max_neighbors, keep_environments)

    def encode_crystal(self, crystal):
        """``N × d`` latent matrix with rows in canonical atom order."""
        return self.encode_environments(self.prepare([crystal]))

    @property
    def codes(self):
        return self.codebook.detach().numpy()

    def assign(self, latents):
        return quantize_rows(latents, self.codes)

    @torch.no_grad()
    def decode_codes(self, code_vectors):
        """Decoder heads for one crystal: (logits N×100, coords N×3, lattice_hat 6)."""
        codes = torch.as_tensor(np.asarray(code_vectors), dtype=torch.float32)[None]
        logits, coords, hat = self.decoder(codes)
        return logits[0].numpy(), coords[0].numpy(), hat[0].numpy()

    def decode_crystal(self, code_vectors):
        logits, coords, hat = self.decode_codes(code_vectors)
        return assemble_crystal(logits, coords, hat)

    def reconstruct(self, crystal):
        latents = self.encode_crystal(crystal)
        idx, _ = self.assign(latents)
        return self.decode_crystal(self.codes[idx])

    # -- persistence -------------------------------------------------------
    def save(self, path, seed=None):
        torch.save(
            {
                "schema_version": CHECKPOINT_SCHEMA,
                "kind": "concept-vqvae",
                "config": asdict(self.cfg),
                "state_dict": self.state_dict(),
                "provenance": self.provenance,
                "seed": seed,
            },
            path,
        )

    @classmethod
    def load(cls, path):
        blob = torch.load(path, weights_only=True)
        if blob.get("schema_version", 0) > CHECKPOINT_SCHEMA:
            raise ConfigError(f"checkpoint schema {blob['schema_version']} is newer than {CHECKPOINT_SCHEMA}")
        model = cls(CodebookConfig(**blob["config"]))
        model.load_state_dict(blob["state_dict"])
        model.provenance = blob.get("provenance", {})
        model.eval()
        return model


def assemble_crystal(logits, coords, lattice_hat, min_eigenvalue=1e-3):
    """Crystal from decoder heads: argmax species, symmetric lattice, wrapped coordinates."""
    lattice = lattice_from_hat(lattice_hat, min_eigenvalue)
    numbers = np.argmax(np.asarray(logits), axis=-1) + 1
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise DecodeFailed("non-finite coordinates")
    frac = (coords @ np.linalg.inv(lattice)) % 1.0
    try:
        return Crystal(lattice, frac @ lattice, numbers)
    except Exception as exc:
        raise DecodeFailed(str(exc)) from exc


def _run_epochs(model, envs, epochs, cfg, generator, stage, step_fn, history):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    step = 0
    for epoch in range(epochs):
        total = 0.0
        for idx in minibatches(envs.num_crystals, cfg.batch_size, generator):
            losses = step_fn(idx)
            value = check_finite(losses["total"], stage, step)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            total += value * len(idx)
            step += 1
        history.append({"stage": stage, "epoch": epoch, "loss": total / envs.num_crystals})
    return step


@dataclass
class TrainingLog:
    history: list = field(default_factory=list)
    seconds: dict = field(default_factory=dict)


def train_three_stage(dataset, cfg, seed, envs=None):
    """VAE pretraining, K-Means codebook initialization, VQ-VAE fine-tuning.

    Returns ``(model, log)``; the model is left in eval mode.
    """
    if not dataset:
        raise InsufficientData("empty dataset")
    if max(c.num_atoms for c in dataset) > cfg.max_atoms:
        raise ConfigError(f"a crystal exceeds max_atoms={cfg.max_atoms}")
    torch.manual_seed(seed)
    model = ConceptVQVAE(cfg)
    envs = envs or model.prepare(dataset)
    gen = torch_generator(seed)
    record = TrainingLog()

    t0 = time.perf_counter()
    model.train()
    _run_epochs(model, envs, cfg.vae_epochs, cfg, gen, "vae", lambda idx: model.vae_step(envs, idx, gen),
                record.history)
    record.seconds["vae"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model.eval()
    latents = model.encode_environments(envs)
    book = kmeans_init(latents, cfg.codebook_size, seed, cfg.kmeans_max_iter)
    with torch.no_grad():
        model.codebook.copy_(torch.as_tensor(book.codes, dtype=torch.float32))
    record.seconds["kmeans"] = time.perf_counter() - t0
    log.info("k-means initialized %d codes from %d latents", cfg.codebook_size, len(latents))

    t0 = time.perf_counter()
    model.train()
    _run_epochs(model, envs, cfg.vqvae_epochs, cfg, gen, "vqvae", lambda idx: model.vq_step(envs, idx),
                record.history)
    model.eval()
    record.seconds["vqvae"] = time.perf_counter() - t0
    model.provenance = {"stages": ["vae", "kmeans", "vqvae"], "seed": seed,
                        "epochs": {"vae": cfg.vae_epochs, "vqvae": cfg.vqvae_epochs}}
    return model, record


def reconstruct_and_match(crystal, model, matcher=MatcherConfig()):
    """Encode, quantize, decode and compare against the input."""
    try:
        rebuilt = model.reconstruct(crystal)
    except DecodeFailed:
        return False
    return structures_match(crystal, rebuilt, matcher)


def reconstruction_ratio(crystals, model, matcher=MatcherConfig()):
    if not crystals:
        return 0.0
    return float(np.mean([reconstruct_and_match(c, model, matcher) for c in crystals]))


def frozen_copy(model):
    clone = copy.deepcopy(model)
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone.eval()
