"""Tolerance-based structure equivalence.

Two crystals match when

1. their reduced formulas agree,
2. the Niggli-reduced basis of one can be matched by a basis of the other:
   three lattice vectors with lengths within ``ltol`` (relative) and
   inter-vector angles within ``angle_tol`` degrees, spanning the full cell.
   Searching lattice vectors rather than comparing reduced parameters keeps
   the test stable for cells close to a reduction boundary, and
3. their species-pair-resolved sorted periodic distance lists (all pairs up to
   ``cutoff`` Å) agree entry by entry within ``stol * (V/N)^(1/3)``.

Every check is evaluated in both directions and AND-combined, so the relation
is symmetric by construction.  Cells are compared as given; a supercell never
matches its primitive cell.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

FINGERPRINT_CUTOFF = 4.0


@dataclass(frozen=True)
class MatcherConfig:
    stol: float = 0.5
    angle_tol: float = 10.0
    ltol: float = 0.3
    cutoff: float = FINGERPRINT_CUTOFF

    def __post_init__(self):
        if min(self.stol, self.angle_tol, self.ltol, self.cutoff) <= 0:
            raise ValueError("matcher tolerances must be positive")


def niggli_parameters(lattice, eps_rel=1e-5, max_iter=1000):
    """Niggli-reduced (a, b, c, alpha, beta, gamma), angles in degrees.

    Křivý–Gruber reduction carried out on the Gram parameters with the
    epsilon handling of Grosse-Kunstleve et al.
    """
    L = np.asarray(lattice, dtype=float)
    G = L @ L.T
    A, B, C = G[0, 0], G[1, 1], G[2, 2]
    xi, eta, zeta = 2 * G[1, 2], 2 * G[0, 2], 2 * G[0, 1]
    e = eps_rel * abs(np.linalg.det(L)) ** (2.0 / 3.0)

    def sign(x):
        return -1 if x < -e else (1 if x > e else 0)

    for _ in range(max_iter):
        if A > B + e or (abs(A - B) <= e and abs(xi) > abs(eta) + e):
            A, B, xi, eta = B, A, eta, xi
        if B > C + e or (abs(B - C) <= e and abs(eta) > abs(zeta) + e):
            B, C, eta, zeta = C, B, zeta, eta
            continue
        if sign(xi) * sign(eta) * sign(zeta) == 1:
            xi, eta, zeta = abs(xi), abs(eta), abs(zeta)
        else:
            xi, eta, zeta = -abs(xi), -abs(eta), -abs(zeta)
        if (abs(xi) > B + e or (abs(xi - B) <= e and 2 * eta < zeta - e)
                or (abs(xi + B) <= e and zeta < -e)):
            s = 1 if xi > 0 else -1
            C, eta, xi = B + C - xi * s, eta - zeta * s, xi - 2 * B * s
            continue
        if (abs(eta) > A + e or (abs(eta - A) <= e and 2 * xi < zeta - e)
                or (abs(eta + A) <= e and zeta < -e)):
            s = 1 if eta > 0 else -1
            C, xi, eta = A + C - eta * s, xi - zeta * s, eta - 2 * A * s
            continue
        if (abs(zeta) > A + e or (abs(zeta - A) <= e and 2 * xi < eta - e)
                or (abs(zeta + A) <= e and eta < -e)):
            s = 1 if zeta > 0 else -1
            B, xi, zeta = A + B - zeta * s, xi - eta * s, zeta - 2 * A * s
            continue
        total = xi + eta + zeta + A + B
        if total < -e or (abs(total) <= e and 2 * (A + eta) + zeta > e):
            C, xi, eta = A + B + C + xi + eta + zeta, 2 * B + xi + zeta, 2 * A + eta + zeta
            continue
        break

    a, b, c = math.sqrt(A), math.sqrt(B), math.sqrt(C)

    def angle(dot2, p, q):
        return math.degrees(math.acos(max(-1.0, min(1.0, dot2 / (2 * p * q)))))

    return np.array([a, b, c, angle(xi, b, c), angle(eta, a, c), angle(zeta, a, b)])


def _reduced_formula(numbers):
    zs, counts = np.unique(numbers, return_counts=True)
    g = reduce(math.gcd, counts.tolist())
    return tuple(zip(zs.tolist(), (counts // g).tolist()))


def _pair_distances(crystal, cutoff):
    """Sorted distances per species pair, out to ``cutoff`` Å."""
    lattice = crystal.lattice
    inv = np.linalg.inv(lattice)
    spacing = 1.0 / np.linalg.norm(inv, axis=0)
    # capped so that pathological (near-flat) cells stay tractable
    reach = np.minimum(np.ceil(cutoff / spacing).astype(int) + 1, 8)
    shifts = np.array(list(itertools.product(*[range(-r, r + 1) for r in reach])), dtype=float)
    frac = crystal.frac_coords % 1.0
    cart = frac @ lattice
    images = (cart[None, :, :] + (shifts @ lattice)[:, None, :]).reshape(-1, 3)
    image_species = np.tile(crystal.atomic_numbers, len(shifts))
    species = np.unique(crystal.atomic_numbers)
    d = np.linalg.norm(cart[:, None, :] - images[None, :, :], axis=2)
    zero = int(np.flatnonzero(~shifts.any(axis=1))[0])
    n = crystal.num_atoms
    d[np.arange(n), zero * n + np.arange(n)] = np.inf
    out = {}
    for za, zb in itertools.combinations_with_replacement(species.tolist(), 2):
        rows = crystal.atomic_numbers == za
        cols = image_species == zb
        vals = d[np.ix_(rows, cols)].ravel()
        vals = np.sort(vals[np.isfinite(vals)])
        out[(za, zb)] = vals
    return out


@dataclass(frozen=True, eq=False)
class StructureFingerprint:
    """Precomputed matching data for one crystal."""

    formula: tuple
    num_atoms: int
    niggli: np.ndarray
    lattice: np.ndarray
    volume_per_atom: float
    core: dict
    extended: dict

    @classmethod
    def of(cls, crystal, cfg=MatcherConfig()):
        ext_cutoff = cfg.cutoff * (1.0 + cfg.ltol) + 2.0 * cfg.stol * (crystal.volume / crystal.num_atoms) ** (1 / 3)
        extended = _pair_distances(crystal, ext_cutoff)
        core = {}
        for key, vals in extended.items():
            inside = vals[vals <= cfg.cutoff]
            core[key] = inside if len(inside) else vals[:1]
        return cls(
            formula=_reduced_formula(crystal.atomic_numbers),
            num_atoms=crystal.num_atoms,
            niggli=niggli_parameters(crystal.lattice),
            lattice=np.array(crystal.lattice, dtype=float),
            volume_per_atom=crystal.volume / crystal.num_atoms,
            core=core,
            extended=extended,
        )


def _lattice_points(lattice, radius):
    inv = np.linalg.inv(lattice)
    spacing = 1.0 / np.linalg.norm(inv, axis=0)
    reach = np.minimum(np.ceil(radius / spacing).astype(int), 8)
    ints = np.array(list(itertools.product(*[range(-r, r + 1) for r in reach])), dtype=float)
    pts = ints @ lattice
    norms = np.linalg.norm(pts, axis=1)
    keep = (norms > 1e-8) & (norms <= radius)
    return pts[keep], norms[keep]


def _angle(u, v):
    cos = np.clip((u @ v.T) / np.outer(np.linalg.norm(u, axis=-1), np.linalg.norm(v, axis=-1)), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def _lattice_close(params, other_lattice, cfg):
    """Whether ``other_lattice`` has a basis resembling reduced parameters ``params``."""
    lengths, angles = params[:3], params[3:]
    pts, norms = _lattice_points(other_lattice, lengths.max() * (1.0 + cfg.ltol))
    cands = [pts[np.abs(norms - ln) <= cfg.ltol * np.minimum(norms, ln)] for ln in lengths]
    if any(len(c) == 0 for c in cands):
        return False
    va, vb, vc = cands
    volume = abs(np.linalg.det(other_lattice))
    # angles: alpha between b and c, beta between a and c, gamma between a and b
    ok_ab = np.abs(_angle(va, vb) - angles[2]) <= cfg.angle_tol
    ok_ac = np.abs(_angle(va, vc) - angles[1]) <= cfg.angle_tol
    ok_bc = np.abs(_angle(vb, vc) - angles[0]) <= cfg.angle_tol
    for i, j in zip(*np.nonzero(ok_ab)):
        ks = np.nonzero(ok_ac[i] & ok_bc[j])[0]
        if len(ks) == 0:
            continue
        dets = np.abs(np.cross(va[i], vb[j]) @ vc[ks].T)
        if np.any(np.abs(dets - volume) <= 1e-3 * volume):
            return True
    return False


def _distances_close(fa, fb, tol):
    for key, vals in fa.core.items():
        other = fb.extended.get(key)
        if other is None or len(other) < len(vals):
            return False
        if len(vals) and np.max(np.abs(vals - other[:len(vals)])) > tol:
            return False
    return True


def fingerprints_match(fa, fb, cfg=MatcherConfig()):
    if fa.formula != fb.formula or fa.num_atoms != fb.num_atoms:
        return False
    if not (_lattice_close(fa.niggli, fb.lattice, cfg) and _lattice_close(fb.niggli, fa.lattice, cfg)):
        return False
    tol = cfg.stol * (0.5 * (fa.volume_per_atom + fb.volume_per_atom)) ** (1 / 3)
    return _distances_close(fa, fb, tol) and _distances_close(fb, fa, tol)


def structures_match(c1, c2, cfg=MatcherConfig()):
    return fingerprints_match(StructureFingerprint.of(c1, cfg), StructureFingerprint.of(c2, cfg), cfg)
