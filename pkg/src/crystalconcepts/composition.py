"""Composition generator: a DDPM over pre-quantization latent matrices.

Latent matrices of different sizes are padded to ``max_atoms`` rows and the
loss only sees live rows.  Samples are truncated to a drawn size and each row
is snapped to its nearest codebook entry, giving a :class:`Composition`.
Compositions whose decoded crystal passes the V.S.U.N screen can then be fed
back as extra training data for the generator.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .codebook import quantize_rows
from .denoiser import SetDenoiser
from .diffusion import NoiseSchedule, cosine_schedule, ddpm_training_loss, reverse_sample
from .errors import ConfigError, DecodeFailed, InsufficientData, RefinementSkipped, TooManyAtoms
from .evaluation import compute_metrics
from .matcher import MatcherConfig
from .training import check_finite, minibatches, torch_generator

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True, eq=False)
class LatentMatrix:
    Z: np.ndarray

    @property
    def n_atoms(self):
        return self.Z.shape[0]


@dataclass(frozen=True, eq=False)
class Composition:
    """Quantized concept rows ``E`` plus the raw sample ``z`` they came from."""

    E: np.ndarray
    code_indices: np.ndarray
    z: np.ndarray | None = None

    @property
    def n_atoms(self):
        return len(self.code_indices)

    def to_record(self):
        rec = {"code_indices": np.asarray(self.code_indices).tolist(), "n_atoms": self.n_atoms}
        if self.z is not None:
            rec["z"] = np.asarray(self.z).tolist()
        return rec

    @classmethod
    def from_record(cls, record, codes):
        idx = np.asarray(record["code_indices"], dtype=np.int64)
        z = np.asarray(record["z"], dtype=np.float32) if "z" in record else None
        return cls(np.asarray(codes)[idx], idx, z)


def composition_from_codes(code_indices, codes, z=None):
    idx = np.asarray(code_indices, dtype=np.int64)
    return Composition(np.asarray(codes)[idx], idx, z)


@dataclass(frozen=True)
class GeneratorConfig:
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    steps: int = 100
    max_atoms: int = 20
    dropout: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    refine_epochs: int = 50
    refine_rounds: int = 1
    clip_denoised: bool = True
    clip_margin: float = 0.5

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if self.steps < 1 or self.max_atoms < 1:
            raise ConfigError("need steps >= 1 and max_atoms >= 1")


def extract_latent_matrices(dataset, vqvae):
    """Encoder means for every crystal, rows in canonical atom order."""
    envs = vqvae.prepare(dataset)
    latents = vqvae.encode_environments(envs)
    offsets = envs.offsets.tolist()
    return [LatentMatrix(latents[offsets[k]:offsets[k + 1]].astype(np.float64)) for k in range(len(dataset))]


@dataclass
class SizeDistribution:
    sizes: np.ndarray
    probs: np.ndarray

    @classmethod
    def empirical(cls, counts):
        sizes, freq = np.unique(np.asarray(counts, dtype=np.int64), return_counts=True)
        return cls(sizes, freq / freq.sum())

    @classmethod
    def constant(cls, n):
        return cls(np.array([n]), np.array([1.0]))

    def sample(self, rng, n):
        return rng.choice(self.sizes, size=n, p=self.probs)

    def to_dict(self):
        return {"sizes": self.sizes.tolist(), "probs": self.probs.tolist()}


def pad_rows(matrices, max_rows, dim):
    """Stack row matrices into ``(M, max_rows, dim)`` plus a padding mask."""
    out = np.zeros((len(matrices), max_rows, dim), dtype=np.float32)
    pad = np.ones((len(matrices), max_rows), dtype=bool)
    for k, m in enumerate(matrices):
        if len(m) > max_rows:
            raise TooManyAtoms(f"{len(m)} rows exceed max_atoms={max_rows}")
        out[k, :len(m)] = m
        pad[k, :len(m)] = False
    return torch.from_numpy(out), torch.from_numpy(pad)


class CompositionGenerator:
    """Trained latent-matrix DDPM plus its standardization and size statistics."""

    def __init__(self, config, latent_dim, mean, std, sizes, schedule=None, bounds=None):
        self.config = config
        self.bounds = None if bounds is None else (np.asarray(bounds[0]), np.asarray(bounds[1]))
        self.latent_dim = latent_dim
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.sizes = sizes
        self.schedule = schedule or cosine_schedule(config.steps)
        self.net = SetDenoiser(latent_dim, config.hidden, config.layers, config.heads, config.max_atoms,
                               dropout=config.dropout)
        self.history = []

    def standardize(self, Z):
        return (np.asarray(Z, dtype=np.float32) - self.mean) / self.std

    def destandardize(self, X):
        return np.asarray(X, dtype=np.float64) * self.std + self.mean

    def denoiser(self, x, s, cond, drop, pad_mask):
        return self.net(x, s, None, None, pad_mask)

    def clip_range(self):
        if not self.config.clip_denoised or self.bounds is None:
            return None
        m = self.config.clip_margin
        return (torch.as_tensor(self.bounds[0] - m, dtype=torch.float32),
                torch.as_tensor(self.bounds[1] + m, dtype=torch.float32))

    def training_tensors(self, matrices):
        return pad_rows([self.standardize(m) for m in matrices], self.config.max_atoms, self.latent_dim)

    def fit(self, matrices, epochs, seed, stage="composition"):
        x0, pad = self.training_tensors(matrices)
        gen = torch_generator(seed)
        opt = torch.optim.Adam(self.net.parameters(), lr=self.config.learning_rate)
        self.net.train()
        step = 0
        for epoch in range(epochs):
            total = 0.0
            for idx in minibatches(len(x0), self.config.batch_size, gen):
                loss = ddpm_training_loss(self.denoiser, x0[idx], None, self.schedule, gen, 0.0, pad[idx])
                value = check_finite(loss, stage, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += value * len(idx)
                step += 1
            self.history.append({"stage": stage, "epoch": epoch, "loss": total / len(x0)})
        self.net.eval()
        return self

    def save(self, path, seed=None):
        torch.save(
            {
                "schema_version": CHECKPOINT_SCHEMA,
                "kind": "composition-generator",
                "config": asdict(self.config),
                "latent_dim": self.latent_dim,
                "mean": self.mean.tolist(),
                "std": self.std.tolist(),
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
        sizes = SizeDistribution(np.asarray(blob["sizes"]["sizes"]), np.asarray(blob["sizes"]["probs"]))
        gen = cls(GeneratorConfig(**blob["config"]), blob["latent_dim"], blob["mean"], blob["std"], sizes,
                  NoiseSchedule.from_betas(blob["schedule"]["betas"]), blob.get("bounds"))
        gen.net.load_state_dict(blob["state_dict"])
        gen.net.eval()
        gen.history = blob.get("history", [])
        return gen


def train_composition_generator(latents, config, seed):
    if not latents:
        raise InsufficientData("no latent matrices to train on")
    matrices = [lm.Z if isinstance(lm, LatentMatrix) else np.asarray(lm) for lm in latents]
    if max(len(m) for m in matrices) > config.max_atoms:
        raise ConfigError(f"a latent matrix exceeds max_atoms={config.max_atoms}")
    stacked = np.concatenate(matrices)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 1e-6, std, 1.0)
    torch.manual_seed(seed)
    scaled = (stacked - mean) / std
    gen = CompositionGenerator(config, stacked.shape[1], mean, std,
                               SizeDistribution.empirical([len(m) for m in matrices]),
                               bounds=(scaled.min(axis=0), scaled.max(axis=0)))
    return gen.fit(matrices, config.epochs, seed)


def sample_compositions(G, n, codes, size_sampler=None, seed=0):
    """Draw ``n`` latent matrices, truncate to drawn sizes, quantize each row."""
    if n == 0:
        return []
    sizes_dist = size_sampler or G.sizes
    rng = np.random.default_rng(seed)
    sizes = sizes_dist.sample(rng, n)
    if sizes.max() > G.config.max_atoms or sizes.min() < 1:
        raise ConfigError(f"sampled sizes must lie in [1, {G.config.max_atoms}]")
    pad = torch.ones(n, G.config.max_atoms, dtype=torch.bool)
    for k, m in enumerate(sizes):
        pad[k, :m] = False
    gen = torch_generator(seed)
    x = reverse_sample(G.denoiser, (n, G.config.max_atoms, G.latent_dim), None, G.schedule, gen, pad_mask=pad,
                       clip_denoised=G.clip_range())
    x = G.destandardize(x.numpy())
    codes = np.asarray(codes)
    out = []
    for k, m in enumerate(sizes):
        z = x[k, :m]
        idx, _ = quantize_rows(z, codes)
        out.append(Composition(codes[idx], idx, z.astype(np.float32)))
    return out


@dataclass
class FilterReport:
    total: int = 0
    decode_failed: int = 0
    valid: int = 0
    stable: int = 0
    unique: int = 0
    novel: int = 0
    qualified: int = 0
    # per composition: dict of flags (None entries for decode failures)
    verdicts: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d.pop("verdicts")
        return d

    @property
    def qualified_fraction(self):
        return self.qualified / self.total if self.total else 0.0


def filter_vsun(comps, vqvae, reference, oracle, matcher=MatcherConfig()):
    """Keep compositions whose decoded crystal is valid, stable, unique and novel.

    Uniqueness is first-occurrence-wins over successfully decoded crystals in
    input order.  Returns ``(qualified, report, decoded)`` where ``decoded``
    holds the crystal (or None) for every input composition.
    """
    report = FilterReport(total=len(comps))
    decoded, live = [], []
    for k, comp in enumerate(comps):
        try:
            decoded.append(vqvae.decode_crystal(comp.E))
            live.append(k)
        except DecodeFailed:
            decoded.append(None)
            report.decode_failed += 1
    crystals = [decoded[k] for k in live]
    metrics = compute_metrics(crystals, reference, oracle, matcher)
    verdicts = [None] * len(comps)
    qualified = []
    for j, k in enumerate(live):
        flags = {"valid": bool(metrics.valid[j]), "stable": bool(metrics.stable[j]),
                 "unique": bool(metrics.unique[j]), "novel": bool(metrics.novel[j])}
        flags["qualified"] = all(flags.values())
        verdicts[k] = flags
        for key in ("valid", "stable", "unique", "novel", "qualified"):
            setattr(report, key, getattr(report, key) + int(flags[key]))
        if flags["qualified"]:
            qualified.append(comps[k])
    report.verdicts = verdicts
    return qualified, report, decoded


def refine_generator(G, qualified, seed, epochs=None):
    """Continue training a copy of ``G`` on the raw latents of qualified samples."""
    if not qualified:
        raise RefinementSkipped("no qualified compositions to refine on")
    if any(c.z is None for c in qualified):
        raise ConfigError("refinement needs the raw latent of every composition")
    refined = copy.deepcopy(G)
    return refined.fit([c.z for c in qualified], epochs or G.config.refine_epochs, seed, stage="refine")


def write_pool(path, comps, report=None):
    """Composition pool: one JSON record per composition with its verdict."""
    with open(path, "w") as fh:
        for k, comp in enumerate(comps):
            rec = comp.to_record()
            if report is not None:
                rec["verdict"] = report.verdicts[k] if report.verdicts[k] is not None else {"decode_failed": True}
            fh.write(json.dumps(rec) + "\n")


def read_pool(path, codes):
    comps, verdicts = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                comps.append(Composition.from_record(rec, codes))
                verdicts.append(rec.get("verdict"))
    return comps, verdicts
