"""Concept interpretation: nearest environments per code, crystal-family code
profiles, a symmetry classifier over concept sequences, and a check of how
well generated crystals carry the concepts they were conditioned on."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, masked_mean
from .composition import pad_rows
from .errors import ConfigError, InsufficientData
from .training import check_finite, minibatches, torch_generator

log = logging.getLogger(__name__)

FAMILIES = ("Triclinic", "Monoclinic", "Orthorhombic", "Tetragonal", "Hexagonal", "Cubic")
# last space group of each family, in FAMILIES order
_FAMILY_ENDS = (2, 15, 74, 142, 194, 230)


def family_index(space_group):
    sg = int(space_group)
    if not 1 <= sg <= 230:
        raise ValueError(f"space group {sg} outside 1-230")
    return int(np.searchsorted(_FAMILY_ENDS, sg))


def family_of(space_group):
    return FAMILIES[family_index(space_group)]


# -- local view ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EnvironmentHit:
    environment: object
    distance: float
    crystal_index: int
    atom_index: int


def top_k_environments(code, dataset, vqvae, k=5, envs=None):
    """The ``k`` environments assigned to ``code`` closest to it, nearest first."""
    codes = vqvae.codes
    if not 0 <= int(code) < len(codes):
        raise ConfigError(f"code {code} outside [0, {len(codes)})")
    envs = envs or vqvae.prepare(dataset, keep_environments=True)
    if not envs.environments:
        raise ConfigError("environment tensors were prepared without keeping environments")
    latents = vqvae.encode_environments(envs)
    assigned, dist = vqvae.assign(latents)
    hits = np.flatnonzero(assigned == code)
    order = hits[np.lexsort((hits, dist[hits]))][:k]
    offsets = envs.offsets.numpy()
    out = []
    for a in order:
        ci = int(np.searchsorted(offsets, a, side="right") - 1)
        out.append(EnvironmentHit(envs.environments[a], float(dist[a]), ci, int(a - offsets[ci])))
    return out


def environment_dump(hits, code):
    """JSON-ready description of retrieved environments."""
    from . import elements

    items = []
    for h in hits:
        env = h.environment
        center = int(np.argmax(env.rows[0, 3:103])) + 1
        neighbors = [int(np.argmax(r[3:103])) + 1 for r in env.rows[1:env.valid_count]]
        items.append({
            "crystal_index": h.crystal_index,
            "atom_index": h.atom_index,
            "distance": h.distance,
            "center": elements.symbol(center),
            "neighbors": [elements.symbol(z) for z in neighbors],
            "neighbor_distances": env.distances.tolist(),
        })
    return {"code": int(code), "environments": items}


# -- global view --------------------------------------------------------------

@dataclass
class FamilyProfile:
    family: str
    p: np.ndarray
    count: int


@dataclass
class FamilySimilarity:
    profiles: list
    # families present in the matrix (non-empty), in FAMILIES order
    families: list
    matrix: np.ndarray

    def excluding_triclinic(self):
        keep = [i for i, f in enumerate(self.families) if f != "Triclinic"]
        return [self.families[i] for i in keep], self.matrix[np.ix_(keep, keep)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + self.families)
            for f, row in zip(self.families, self.matrix):
                w.writerow([f] + [f"{v:.6f}" for v in row])

    def to_svg(self, path, cell=60):
        n = len(self.families)
        pad = 110
        size = pad + n * cell
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">']
        for i, fi in enumerate(self.families):
            parts.append(f'<text x="{pad - 6}" y="{pad + i * cell + cell / 2}" text-anchor="end">{fi}</text>')
            parts.append(f'<text x="{pad + i * cell + cell / 2}" y="{pad - 8}" text-anchor="middle">{fi[:5]}</text>')
            for j in range(n):
                v = float(self.matrix[i, j])
                shade = int(255 * (1 - v))
                parts.append(f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                             f'fill="rgb(255,{shade},{shade})" stroke="white"/>')
                parts.append(f'<text x="{pad + j * cell + cell / 2}" y="{pad + i * cell + cell / 2 + 4}" '
                             f'text-anchor="middle">{v:.2f}</text>')
        parts.append("</svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(parts) + "\n")


def code_counts_by_family(code_lists, space_groups, n_codes):
    counts = np.zeros((len(FAMILIES), n_codes), dtype=np.int64)
    for codes, sg in zip(code_lists, space_groups):
        np.add.at(counts[family_index(sg)], np.asarray(codes, dtype=np.int64), 1)
    return counts


def profiles_from_counts(counts):
    """Per-family frequency vectors and the cosine matrix over non-empty families."""
    profiles = []
    for f, row in zip(FAMILIES, counts):
        total = row.sum()
        p = row / total if total else np.zeros(len(row))
        profiles.append(FamilyProfile(f, p, int(total)))
    present = [pr for pr in profiles if pr.count > 0]
    P = np.array([pr.p for pr in present]).reshape(len(present), -1)
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    unit = P / np.where(norms > 0, norms, 1.0)
    M = np.clip(unit @ unit.T, 0.0, 1.0)
    np.fill_diagonal(M, 1.0)
    return FamilySimilarity(profiles, [pr.family for pr in present], M)


def crystal_codes(dataset, vqvae):
    envs = vqvae.prepare(dataset)
    idx, _ = vqvae.assign(vqvae.encode_environments(envs))
    offsets = envs.offsets.tolist()
    return [idx[offsets[k]:offsets[k + 1]] for k in range(len(dataset))]


def family_profiles(dataset, vqvae):
    """Per-atom code frequencies per crystal family plus their cosine similarities."""
    if any(c.space_group is None for c in dataset):
        raise ConfigError("every crystal needs a space-group label")
    codes = crystal_codes(dataset, vqvae)
    return profiles_from_counts(code_counts_by_family(codes, [c.space_group for c in dataset], len(vqvae.codes)))


# -- symmetry classifier ------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    layers: int = 8
    hidden: int = 512
    heads: int = 8
    dropout: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    test_fraction: float = 0.2
    max_atoms: int = 20


class SymmetryClassifier(nn.Module):
    """Transformer over concept embeddings, mean pooled, with space-group and family heads."""

    def __init__(self, latent_dim, cfg):
        super().__init__()
        self.cfg = cfg
        self.inp = nn.Linear(latent_dim, cfg.hidden)
        self.backbone = Backbone(cfg.hidden, cfg.layers, cfg.heads, max_len=cfg.max_atoms, dropout=cfg.dropout)

        def head(n):
            return nn.Sequential(nn.Linear(cfg.hidden, cfg.hidden), nn.GELU(), nn.Linear(cfg.hidden, n))

        self.space_group_head = head(230)
        self.family_head = head(len(FAMILIES))

    def forward(self, E, pad):
        pooled = masked_mean(self.backbone(self.inp(E), pad_mask=pad), pad)
        return self.space_group_head(pooled), self.family_head(pooled)


def _accuracies(model, E, pad, sg, fam):
    with torch.no_grad():
        sg_logits, fam_logits = model(E, pad)
    return (float((sg_logits.argmax(-1) == sg).float().mean()),
            float((fam_logits.argmax(-1) == fam).float().mean()))


def train_symmetry_classifier(dataset, vqvae, seed, cfg=ClassifierConfig()):
    """Train on a random split; returns ``(classifier, metrics)`` with held-out accuracies."""
    if any(c.space_group is None for c in dataset):
        raise ConfigError("every crystal needs a space-group label")
    if len(dataset) < 5:
        raise InsufficientData("need at least 5 labeled crystals")
    codes = vqvae.codes
    E, pad = pad_rows([codes[idx] for idx in crystal_codes(dataset, vqvae)], cfg.max_atoms, codes.shape[1])
    sg = torch.tensor([c.space_group - 1 for c in dataset])
    fam = torch.tensor([family_index(c.space_group) for c in dataset])
    gen = torch_generator(seed)
    order = torch.randperm(len(dataset), generator=gen)
    n_test = max(1, int(round(cfg.test_fraction * len(dataset))))
    test, train = order[:n_test], order[n_test:]

    torch.manual_seed(seed)
    model = SymmetryClassifier(codes.shape[1], cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in minibatches(len(train), cfg.batch_size, gen):
            idx = train[b]
            sg_logits, fam_logits = model(E[idx], pad[idx])
            loss = F.cross_entropy(sg_logits, sg[idx]) + F.cross_entropy(fam_logits, fam[idx])
            value = check_finite(loss, "classifier", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            step += 1
        history.append({"epoch": epoch, "loss": total / len(train)})
    model.eval()
    sg_acc, fam_acc = _accuracies(model, E[test], pad[test], sg[test], fam[test])
    train_sg, train_fam = _accuracies(model, E[train], pad[train], sg[train], fam[train])
    metrics = {
        "space_group_accuracy": sg_acc,
        "family_accuracy": fam_acc,
        "train_space_group_accuracy": train_sg,
        "train_family_accuracy": train_fam,
        "n_train": len(train),
        "n_test": len(test),
        "config": asdict(cfg),
        "history": history,
    }
    return model, metrics


# -- composition adherence ----------------------------------------------------

def multiset_overlap(assigned, conditioning):
    """Fraction of ``assigned`` codes matched one-for-one within ``conditioning``."""
    assigned = np.asarray(assigned)
    if len(assigned) == 0:
        return 0.0
    pool = Counter(np.asarray(conditioning).tolist())
    hits = 0
    for t in assigned.tolist():
        if pool[t] > 0:
            pool[t] -= 1
            hits += 1
    return hits / len(assigned)


def verify_composition_adherence(generated, conditioning, vqvae):
    idx, _ = vqvae.assign(vqvae.encode_crystal(generated))
    return multiset_overlap(idx, conditioning.code_indices)


def random_pairing_baseline(generated, compositions, vqvae, seed=0, trials=5):
    """Mean adherence when each crystal is paired with a random composition."""
    crystals = [c for c in generated if c is not None]
    if not crystals or not compositions:
        return 0.0
    rng = np.random.default_rng(seed)
    assigned = [vqvae.assign(vqvae.encode_crystal(c))[0] for c in crystals]
    scores = []
    for _ in range(trials):
        for idx in assigned:
            comp = compositions[rng.integers(len(compositions))]
            scores.append(multiset_overlap(idx, comp.code_indices))
    return float(np.mean(scores))


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
