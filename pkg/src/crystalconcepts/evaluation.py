"""Validity, stability, uniqueness and novelty of generated crystals."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import elements
from .crystal import IMAGE_SHIFTS, Crystal
# structures_match is re-exported as part of the evaluation API
from .matcher import MatcherConfig, StructureFingerprint, fingerprints_match, structures_match  # noqa: F401

log = logging.getLogger(__name__)

MIN_VOLUME = 0.1
MIN_DISTANCE = 0.5
STABILITY_THRESHOLD = 0.1


# -- validity -----------------------------------------------------------------

def min_periodic_distance(crystal):
    """Smallest distance between any two atom occurrences, images included."""
    c = crystal.wrapped()
    shifts = IMAGE_SHIFTS @ c.lattice
    diff = c.cart_coords[None, :, None, :] + shifts[None, None, :, :] - c.cart_coords[:, None, None, :]
    d = np.linalg.norm(diff, axis=-1)
    zero = int(np.flatnonzero(~IMAGE_SHIFTS.any(axis=1))[0])
    idx = np.arange(c.num_atoms)
    d[idx, idx, zero] = np.inf
    return float(d.min())


def composition_valid(numbers):
    """Charge neutrality over tabulated oxidation states plus the Pauling screen.

    Single-element cells and all-metal compositions (alloys) pass.  Otherwise
    some charge-neutral assignment must exist in which every cation is less
    electronegative than every anion.
    """
    zs, counts = np.unique(np.asarray(numbers), return_counts=True)
    counts = counts // reduce(math.gcd, counts.tolist())
    if len(zs) == 1 or all(elements.is_metal(z) for z in zs):
        return True
    states = [elements.oxidation_states(z) for z in zs]
    if any(len(s) == 0 for s in states):
        return False
    en = [elements.electronegativity(z) for z in zs]
    for combo in itertools.product(*states):
        if sum(q * n for q, n in zip(combo, counts)) != 0:
            continue
        cations = [e for q, e in zip(combo, en) if q > 0]
        anions = [e for q, e in zip(combo, en) if q < 0]
        if any(math.isnan(e) for e in cations + anions):
            return True
        if max(cations) < min(anions):
            return True
    return False


@dataclass(frozen=True)
class ValidityResult:
    valid: bool
    structural: bool
    compositional: bool
    reasons: tuple = ()


def check_validity(crystal, comp_checker=composition_valid):
    reasons = []
    if crystal.volume <= MIN_VOLUME:
        reasons.append("volume")
    if min_periodic_distance(crystal) <= MIN_DISTANCE:
        reasons.append("min-distance")
    structural = not reasons
    compositional = bool(comp_checker(crystal.atomic_numbers))
    if not compositional:
        reasons.append("composition")
    return ValidityResult(structural and compositional, structural, compositional, tuple(reasons))


# -- stability ----------------------------------------------------------------

class StabilityOracle:
    """Interface: ``relax(crystal)`` and ``energy_above_hull(crystal)``.

    ``energy_above_hull`` returns ``(value_eV_per_atom, flags)`` where
    ``flags`` is a tuple of strings such as ``"no-reference"``.
    """

    def relax(self, crystal):
        raise NotImplementedError

    def energy_above_hull(self, crystal):
        raise NotImplementedError


def _formula_key(numbers):
    zs, counts = np.unique(np.asarray(numbers), return_counts=True)
    g = reduce(math.gcd, counts.tolist())
    return tuple(zip(zs.tolist(), (counts // g).tolist()))


class ToyStabilityOracle(StabilityOracle):
    """Soft-sphere repulsion with contact distance ``contact * (r_i + r_j)``.

    Pair energy is ``strength * (1 - d / sigma)^2`` for ``d < sigma`` and zero
    beyond.  Relaxation is fixed-cell gradient descent with step halving, so
    the energy never increases.  The hull reference for a composition is the
    lowest relaxed per-atom energy among reference crystals with the same
    reduced formula.
    """

    def __init__(self, reference=(), contact=0.9, strength=1.0, steps=50, step_size=0.2, max_reach=4):
        self.contact = contact
        self.strength = strength
        self.steps = steps
        self.step_size = step_size
        self.max_reach = max_reach
        self._minima = {}
        for c in reference:
            key = _formula_key(c.atomic_numbers)
            e = self.energy_per_atom(self.relax(c))
            if key not in self._minima or e < self._minima[key]:
                self._minima[key] = e

    @property
    def reference_minima(self):
        return dict(self._minima)

    def _shifts(self, lattice, sigma_max):
        spacing = 1.0 / np.linalg.norm(np.linalg.inv(lattice), axis=0)
        reach = np.minimum(np.ceil(sigma_max / spacing).astype(int), self.max_reach)
        return np.array(list(itertools.product(*[range(-r, r + 1) for r in reach])), dtype=float) @ lattice

    def _terms(self, lattice, coords, numbers):
        radii = np.array([elements.radius(z) for z in numbers])
        sigma = self.contact * (radii[:, None] + radii[None, :])
        shifts = self._shifts(lattice, sigma.max())
        # vec[i, j, n] = x_j + shift_n - x_i
        vec = coords[None, :, None, :] + shifts[None, None, :, :] - coords[:, None, None, :]
        d = np.linalg.norm(vec, axis=-1)
        n = len(numbers)
        self_pair = np.eye(n, dtype=bool)[:, :, None] & (np.abs(shifts).sum(axis=1) == 0)[None, None, :]
        d = np.where(self_pair, np.inf, d)
        return vec, d, sigma[:, :, None]

    def energy(self, crystal):
        _, d, sigma = self._terms(crystal.lattice, crystal.cart_coords, crystal.atomic_numbers)
        overlap = np.clip(1.0 - d / sigma, 0.0, None)
        return 0.5 * self.strength * float((overlap ** 2).sum())

    def energy_per_atom(self, crystal):
        return self.energy(crystal) / crystal.num_atoms

    def _gradient(self, lattice, coords, numbers):
        vec, d, sigma = self._terms(lattice, coords, numbers)
        overlap = np.clip(1.0 - d / sigma, 0.0, None)
        n = len(numbers)
        same = np.eye(n, dtype=bool)[:, :, None]
        # dE/dd for each occurrence; self-images are independent of positions
        dphi = np.where(same, 0.0, -2.0 * self.strength * overlap / sigma)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(np.isfinite(d)[..., None] & (d[..., None] > 0), vec / d[..., None], 0.0)
        return -(dphi[..., None] * unit).sum(axis=(1, 2))

    def relax(self, crystal):
        lattice, numbers = crystal.lattice, crystal.atomic_numbers
        x = crystal.cart_coords.copy()
        energy = self.energy(crystal)
        step = self.step_size
        for _ in range(self.steps):
            if energy == 0.0:
                break
            g = self._gradient(lattice, x, numbers)
            while step > 1e-6:
                trial = x - step * g
                e = self.energy(Crystal(lattice, trial, numbers))
                if e < energy:
                    x, energy = trial, e
                    break
                step *= 0.5
            else:
                break
        return Crystal(lattice, x, numbers, crystal.space_group)

    def energy_above_hull(self, crystal):
        e = self.energy_per_atom(crystal)
        ref = self._minima.get(_formula_key(crystal.atomic_numbers))
        if ref is None:
            return 0.0, ("no-reference",)
        return e - ref, ()


# -- metrics ------------------------------------------------------------------

AGGREGATE_COLUMNS = ("V", "S", "U", "N", "S.U.N", "V.S.U.N")


@dataclass
class MetricsReport:
    """Per-crystal flags and the aggregate table.

    ``valid``, ``stable``, ``unique`` and ``novel`` are the raw flags computed
    over every generated crystal.  ``unique_valid`` deduplicates among valid
    crystals only.  The headline aggregates restrict S, U and N to valid
    crystals (a crystal counts towards S only if it is valid and stable, and
    so on) while S.U.N and V.S.U.N are means of the raw flag products.
    ``raw`` holds the unrestricted means.
    """

    valid: np.ndarray
    stable: np.ndarray
    unique: np.ndarray
    novel: np.ndarray
    unique_valid: np.ndarray
    e_hull: np.ndarray
    reasons: list = field(default_factory=list)
    stability_flags: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.valid)

    def _mean(self, flags):
        return float(np.mean(flags)) if len(flags) else 0.0

    @property
    def aggregates(self):
        v, s, u, n = self.valid, self.stable, self.unique, self.novel
        return {
            "V": self._mean(v),
            "S": self._mean(v & s),
            "U": self._mean(v & self.unique_valid),
            "N": self._mean(v & n),
            "S.U.N": self._mean(s & u & n),
            "V.S.U.N": self._mean(v & s & u & n),
        }

    @property
    def raw(self):
        return {"V": self._mean(self.valid), "S": self._mean(self.stable),
                "U": self._mean(self.unique), "N": self._mean(self.novel)}

    def to_dict(self):
        return {
            "count": self.count,
            "aggregates": self.aggregates,
            "raw": self.raw,
            "crystals": [
                {"valid": bool(self.valid[i]), "stable": bool(self.stable[i]), "unique": bool(self.unique[i]),
                 "novel": bool(self.novel[i]), "unique_valid": bool(self.unique_valid[i]),
                 "e_hull": float(self.e_hull[i]) if math.isfinite(self.e_hull[i]) else None, "reasons": list(self.reasons[i]),
                 "stability_flags": list(self.stability_flags[i])}
                for i in range(self.count)
            ],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "valid", "stable", "unique", "novel", "e_hull"])
            for i in range(self.count):
                w.writerow([i, int(self.valid[i]), int(self.stable[i]), int(self.unique[i]),
                            int(self.novel[i]), f"{self.e_hull[i]:.6g}"])


def _first_occurrence(fps, mask, cfg):
    """Uniqueness flags: a crystal in ``mask`` is unique unless an earlier one matches it."""
    keep = np.zeros(len(fps), dtype=bool)
    seen = {}
    for i, fp in enumerate(fps):
        if not mask[i]:
            continue
        bucket = seen.setdefault((fp.formula, fp.num_atoms), [])
        keep[i] = not any(fingerprints_match(other, fp, cfg) for other in bucket)
        bucket.append(fp)
    return keep


def _stability(crystal, oracle):
    try:
        e, flags = oracle.energy_above_hull(oracle.relax(crystal))
    except Exception as exc:  # oracle failures only cost this crystal its S flag
        log.warning("stability oracle failed: %s", exc)
        return math.inf, ("oracle-failure",)
    if not math.isfinite(e):
        return math.inf, tuple(flags) + ("non-finite",)
    return e, tuple(flags)


def compute_metrics(generated, reference, oracle, matcher=MatcherConfig(), comp_checker=composition_valid):
    """Flags and aggregates for ``generated``; None entries (failed decodes) get all-False flags."""
    ok = np.array([c is not None for c in generated], dtype=bool)
    validity = [check_validity(c, comp_checker) if c is not None else ValidityResult(False, False, False, ("decode-failed",))
                for c in generated]
    valid = np.array([v.valid for v in validity], dtype=bool)
    stab = [_stability(c, oracle) if c is not None else (math.inf, ("decode-failed",)) for c in generated]
    e_hull = np.array([e for e, _ in stab], dtype=float)
    stable = e_hull <= STABILITY_THRESHOLD
    fps = [StructureFingerprint.of(c, matcher) if c is not None else None for c in generated]
    unique = _first_occurrence(fps, ok, matcher)
    unique_valid = _first_occurrence(fps, valid, matcher)
    ref_index = {}
    for c in reference:
        fp = StructureFingerprint.of(c, matcher)
        ref_index.setdefault((fp.formula, fp.num_atoms), []).append(fp)
    novel = np.array([fp is not None and not any(fingerprints_match(fp, r, matcher)
                                                 for r in ref_index.get((fp.formula, fp.num_atoms), ()))
                      for fp in fps], dtype=bool)
    return MetricsReport(
        valid=valid, stable=stable, unique=unique, novel=novel, unique_valid=unique_valid,
        e_hull=e_hull, reasons=[v.reasons for v in validity], stability_flags=[f for _, f in stab],
    )
