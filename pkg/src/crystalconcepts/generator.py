"""Composition-conditioned DDPM over full atom-vector matrices.

The diffusion state of a crystal is its ``max_atoms × 109`` matrix of atom
vectors in canonical atom order (coordinates, one-hot species, lattice
6-vector), with coordinate and lattice channels standardized.  A composition
conditions row ``r`` of the crystal with concept row ``r``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .composition import SizeDistribution, pad_rows
from .crystal import (
    ATOM_VECTOR_DIM,
    COORD_SLICE,
    LATTICE_SLICE,
    SPECIES_SLICE,
    Crystal,
    build_atom_vectors,
    canonicalize,
    lattice_from_hat,
)
from .denoiser import SetDenoiser
from .diffusion import NoiseSchedule, cosine_schedule, ddpm_training_loss, reverse_sample
from .errors import ConfigError, DecodeFailed, InsufficientData, TooManyAtoms
from .training import check_finite, minibatches, torch_generator

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
# channels that are standardized; the one-hot block stays {0, 1}
_SCALED = np.zeros(ATOM_VECTOR_DIM, dtype=bool)
_SCALED[COORD_SLICE] = True
_SCALED[LATTICE_SLICE] = True


@dataclass(frozen=True)
class BaseModelConfig:
    layers: int = 8
    hidden: int = 512
    heads: int = 8
    steps: int = 256
    max_atoms: int = 20
    omega: float = 2.0
    cond_drop_prob: float = 0.2
    dropout: float = 0.0
    learning_rate: float = 1e-3
    # "constant" or "cosine" (anneal to zero over the run)
    lr_schedule: str = "constant"
    batch_size: int = 64
    epochs: int = 200
    # clamp the sampler's clean-sample estimate to the training range (+ margin)
    clip_denoised: bool = True
    clip_margin: float = 0.5

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if self.omega < 0 or not 0 <= self.cond_drop_prob <= 1:
            raise ConfigError("need omega >= 0 and cond_drop_prob in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


class Standardizer:
    """Per-channel affine map fitted on live rows; one-hot channels untouched."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, rows):
        rows = np.asarray(rows, dtype=np.float64)
        mean = np.where(_SCALED, rows.mean(axis=0), 0.0)
        std = np.where(_SCALED, rows.std(axis=0), 1.0)
        return cls(mean, np.where(std > 1e-6, std, 1.0))

    @classmethod
    def identity(cls):
        return cls(np.zeros(ATOM_VECTOR_DIM), np.ones(ATOM_VECTOR_DIM))

    def apply(self, rows):
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std

    def invert(self, rows):
        return np.asarray(rows, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def crystal_to_training_tensor(crystal, standardizer=None, max_atoms=20):
    """``(max_atoms × 109 matrix, live mask)``; padding rows are zero with mask False."""
    if crystal.num_atoms > max_atoms:
        raise TooManyAtoms(f"{crystal.num_atoms} atoms exceed max_atoms={max_atoms}")
    rows = build_atom_vectors(canonicalize(crystal))
    if standardizer is not None:
        rows = standardizer.apply(rows)
    out = np.zeros((max_atoms, ATOM_VECTOR_DIM))
    out[:len(rows)] = rows
    live = np.zeros(max_atoms, dtype=bool)
    live[:len(rows)] = True
    return out, live


def decode_sample(matrix, min_eigenvalue=1e-3):
    """Crystal from an ``N × 109`` de-standardized matrix (lattice in the symmetric frame)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or len(matrix) < 1 or matrix.shape[1] != ATOM_VECTOR_DIM:
        raise DecodeFailed(f"cannot decode a matrix of shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise DecodeFailed("non-finite sample")
    numbers = np.argmax(matrix[:, SPECIES_SLICE], axis=1) + 1
    lattice = lattice_from_hat(matrix[:, LATTICE_SLICE].mean(axis=0), min_eigenvalue)
    frac = (matrix[:, COORD_SLICE] @ np.linalg.inv(lattice)) % 1.0
    try:
        return Crystal(lattice, frac @ lattice, numbers)
    except Exception as exc:
        raise DecodeFailed(str(exc)) from exc


def build_denoiser(config, cond_dim=None):
    return SetDenoiser(ATOM_VECTOR_DIM, config.hidden, config.layers, config.heads, config.max_atoms,
                       cond_dim=cond_dim, dropout=config.dropout)


class BaseModel:
    def __init__(self, config, standardizer, sizes, cond_dim=None, schedule=None, bounds=None):
        self.config = config
        self.standardizer = standardizer
        self.sizes = sizes
        self.cond_dim = cond_dim
        self.schedule = schedule or cosine_schedule(config.steps)
        # per-channel (low, high) of standardized training rows
        self.bounds = None if bounds is None else (np.asarray(bounds[0]), np.asarray(bounds[1]))
        self.net = build_denoiser(config, cond_dim)
        self.history = []

    def clip_range(self):
        if not self.config.clip_denoised or self.bounds is None:
            return None
        m = self.config.clip_margin
        return (torch.as_tensor(self.bounds[0] - m, dtype=torch.float32),
                torch.as_tensor(self.bounds[1] + m, dtype=torch.float32))

    @property
    def conditional(self):
        return self.cond_dim is not None

    def denoiser(self, x, s, cond, drop, pad_mask):
        if not self.conditional:
            cond, drop = None, None
        return self.net(x, s, cond, drop, pad_mask)

    def save(self, path, seed=None):
        torch.save(
            {
                "schema_version": CHECKPOINT_SCHEMA,
                "kind": "base-model",
                "config": asdict(self.config),
                "cond_dim": self.cond_dim,
                "standardizer": self.standardizer.to_dict(),
                "bounds": None if self.bounds is None else [b.tolist() for b in self.bounds],
                "sizes": self.sizes.to_dict(),
                "schedule": self.schedule.to_dict(),
                "state_dict": self.net.state_dict(),
                "history": self.history,
                "seed": seed,
            },
            path,
        )

    @classmethod
    def load(cls, path):
        blob = torch.load(path, weights_only=True)
        if blob.get("schema_version", 0) > CHECKPOINT_SCHEMA:
            raise ConfigError(f"checkpoint schema {blob['schema_version']} is newer than {CHECKPOINT_SCHEMA}")
        model = cls(
            BaseModelConfig(**blob["config"]),
            Standardizer(blob["standardizer"]["mean"], blob["standardizer"]["std"]),
            SizeDistribution(np.asarray(blob["sizes"]["sizes"]), np.asarray(blob["sizes"]["probs"])),
            blob["cond_dim"],
            NoiseSchedule.from_betas(blob["schedule"]["betas"]),
            blob.get("bounds"),
        )
        model.net.load_state_dict(blob["state_dict"])
        model.net.eval()
        model.history = blob.get("history", [])
        return model


def _condition_tensor(comps, max_atoms):
    return pad_rows([np.asarray(c.E, dtype=np.float32) for c in comps], max_atoms, comps[0].E.shape[1])[0]


def train_base_model(dataset, compositions, config, seed):
    """Train the base DDPM; ``compositions`` (one per crystal) or None for unconditional."""
    if not dataset:
        raise InsufficientData("empty dataset")
    if compositions is not None and len(compositions) != len(dataset):
        raise ConfigError("need exactly one composition per training crystal")
    canon = [canonicalize(c) for c in dataset]
    if max(c.num_atoms for c in canon) > config.max_atoms:
        raise TooManyAtoms(f"a crystal exceeds max_atoms={config.max_atoms}")
    if compositions is not None:
        for c, comp in zip(canon, compositions):
            if comp.n_atoms != c.num_atoms:
                raise ConfigError("composition size differs from its crystal's atom count")
    standardizer = Standardizer.fit(np.concatenate([build_atom_vectors(c) for c in canon]))
    torch.manual_seed(seed)
    cond_dim = None if compositions is None else compositions[0].E.shape[1]
    model = BaseModel(config, standardizer, SizeDistribution.empirical([c.num_atoms for c in canon]), cond_dim)

    tensors = [crystal_to_training_tensor(c, standardizer, config.max_atoms) for c in canon]
    x0 = torch.as_tensor(np.stack([t for t, _ in tensors]), dtype=torch.float32)
    pad = torch.as_tensor(np.stack([~live for _, live in tensors]))
    live_rows = x0[~pad].numpy()
    model.bounds = (live_rows.min(axis=0).astype(np.float64), live_rows.max(axis=0).astype(np.float64))
    cond = None if compositions is None else _condition_tensor(compositions, config.max_atoms)
    drop_prob = config.cond_drop_prob if model.conditional else 0.0

    gen = torch_generator(seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    sched = None
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    model.net.train()
    step = 0
    for epoch in range(config.epochs):
        total = 0.0
        for idx in minibatches(len(x0), config.batch_size, gen):
            batch_cond = None if cond is None else cond[idx]
            loss = ddpm_training_loss(model.denoiser, x0[idx], batch_cond, model.schedule, gen, drop_prob, pad[idx])
            value = check_finite(loss, "base", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            step += 1
        if sched is not None:
            sched.step()
        model.history.append({"stage": "base", "epoch": epoch, "loss": total / len(x0)})
    model.net.eval()
    return model


def generate(model, n, compositions=None, omega=None, seed=0, return_raw=False):
    """Sample ``n`` crystals; entries are None where decoding failed.

    With compositions, sample ``i`` is conditioned on
    ``compositions[i % len(compositions)]`` and has exactly that many atoms.
    """
    if n == 0:
        return ([], []) if return_raw else []
    omega = model.config.omega if omega is None else omega
    max_atoms = model.config.max_atoms
    if compositions:
        if not model.conditional:
            raise ConfigError("an unconditional model cannot take compositions")
        chosen = [compositions[i % len(compositions)] for i in range(n)]
        sizes = np.array([c.n_atoms for c in chosen])
        cond = _condition_tensor(chosen, max_atoms)
    else:
        sizes = model.sizes.sample(np.random.default_rng(seed), n)
        cond = None
    if sizes.max() > max_atoms:
        raise TooManyAtoms(f"a composition exceeds max_atoms={max_atoms}")
    pad = torch.ones(n, max_atoms, dtype=torch.bool)
    for k, m in enumerate(sizes):
        pad[k, :m] = False
    x = reverse_sample(model.denoiser, (n, max_atoms, ATOM_VECTOR_DIM), cond, model.schedule,
                       torch_generator(seed), omega=omega, pad_mask=pad, clip_denoised=model.clip_range())
    raw = [model.standardizer.invert(x[k, :m].numpy()) for k, m in enumerate(sizes)]
    out = []
    for k, rows in enumerate(raw):
        try:
            out.append(decode_sample(rows))
        except DecodeFailed as exc:
            log.info("sample %d failed to decode: %s", k, exc)
            out.append(None)
    return (out, raw) if return_raw else out
