"""Desk-scale synthetic crystals built from jittered prototype templates.

Species are assigned to template sites so that every crystal is charge
neutral under a fixed ionic charge per element, and the lattice constant is
set from additive ionic radii so no two atoms overlap before jitter.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import elements
from .crystal import Crystal
from .matcher import structures_match

_SQ3 = np.sqrt(3.0)
_FCC_PRIMITIVE = 0.5 * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])

# Keeps every site away from the cell faces so that jitter never wraps an atom.
SITE_OFFSET = np.array([0.11, 0.13, 0.17])

# Formal charge used when assigning species to template sites.
ION_CHARGE = {
    "Li": 1, "Na": 1, "K": 1, "Rb": 1, "Cs": 1, "Ag": 1,
    "Be": 2, "Mg": 2, "Ca": 2, "Sr": 2, "Ba": 2, "Zn": 2, "Ni": 2,
    "Al": 3, "Sc": 3, "Y": 3, "La": 3, "Ti": 4, "Zr": 4,
    "F": -1, "Cl": -1, "Br": -1, "I": -1, "O": -2, "S": -2, "Se": -2, "N": -3,
}


@dataclass(frozen=True)
class Template:
    name: str
    space_group: int
    # lattice at unit lattice constant
    lattice: np.ndarray
    # (role, fractional coordinate) per site
    sites: tuple

    @property
    def roles(self):
        seen = []
        for role, _ in self.sites:
            if role not in seen:
                seen.append(role)
        return tuple(seen)

    def multiplicity(self, role):
        return sum(1 for r, _ in self.sites if r == role)

    def frac_coords(self):
        return (np.array([f for _, f in self.sites], dtype=float) + SITE_OFFSET) % 1.0


def _hexagonal(c_over_a):
    return np.array([[1.0, 0.0, 0.0], [-0.5, _SQ3 / 2, 0.0], [0.0, 0.0, c_over_a]])


TEMPLATES = {
    "rock-salt": Template("rock-salt", 225, _FCC_PRIMITIVE, (("A", (0, 0, 0)), ("B", (0.5, 0.5, 0.5)))),
    "cscl": Template("cscl", 221, np.eye(3), (("A", (0, 0, 0)), ("B", (0.5, 0.5, 0.5)))),
    "fluorite": Template(
        "fluorite", 225, _FCC_PRIMITIVE,
        (("A", (0, 0, 0)), ("B", (0.25, 0.25, 0.25)), ("B", (0.75, 0.75, 0.75))),
    ),
    "perovskite": Template(
        "perovskite", 221, np.eye(3),
        (("A", (0, 0, 0)), ("B", (0.5, 0.5, 0.5)),
         ("X", (0.5, 0.5, 0.0)), ("X", (0.5, 0.0, 0.5)), ("X", (0.0, 0.5, 0.5))),
    ),
    "hexagonal-ab": Template(
        "hexagonal-ab", 194, _hexagonal(np.sqrt(8.0 / 3.0)),
        (("A", (0, 0, 0)), ("A", (0, 0, 0.5)),
         ("B", (1 / 3, 2 / 3, 0.25)), ("B", (2 / 3, 1 / 3, 0.75))),
    ),
    "tetragonal-ab": Template(
        "tetragonal-ab", 123, np.diag([1.0, 1.0, 1.4]), (("A", (0, 0, 0)), ("B", (0.5, 0.5, 0.5))),
    ),
}

DEFAULT_POOL = ("Na", "K", "Mg", "Cl", "Br", "O")


@dataclass(frozen=True)
class SyntheticTemplateSpec:
    templates: tuple = ("rock-salt", "cscl", "fluorite", "perovskite", "hexagonal-ab")
    species_pool: tuple = DEFAULT_POOL
    # multiplies the contact-limited lattice constant
    lattice_scale: tuple = (1.02, 1.10)
    jitter: float = 0.05
    count: int = 100
    # fraction of (template, species) combinations withheld from the dataset
    holdout_fraction: float = 0.0

    def __post_init__(self):
        unknown = [t for t in self.templates if t not in TEMPLATES]
        if unknown:
            raise ValueError(f"unknown templates {unknown}; choose from {sorted(TEMPLATES)}")
        missing = [s for s in self.species_pool if s not in ION_CHARGE]
        if missing:
            raise ValueError(f"no formal charge tabulated for {missing}")
        lo, hi = self.lattice_scale
        if not 0 < lo <= hi:
            raise ValueError("lattice_scale must be an increasing positive range")
        if self.jitter < 0 or not 0 <= self.holdout_fraction < 1:
            raise ValueError("jitter must be >= 0 and holdout_fraction in [0, 1)")


def _min_site_distances(template):
    """Shortest periodic distance between every pair of sites at unit lattice constant."""
    frac = template.frac_coords()
    shifts = np.array(list(itertools.product(range(-2, 3), repeat=3)), dtype=float)
    cart = frac @ template.lattice
    out = np.full((len(frac), len(frac)), np.inf)
    for i, j in itertools.product(range(len(frac)), repeat=2):
        d = np.linalg.norm(cart[j] + shifts @ template.lattice - cart[i], axis=1)
        if i == j:
            d = d[d > 1e-9]
        out[i, j] = d.min()
    return out


def contact_lattice_constant(template, assignment):
    """Smallest lattice constant at which no two ionic spheres overlap."""
    radii = [elements.radius(elements.atomic_number(assignment[r])) for r, _ in template.sites]
    dist = _min_site_distances(template)
    need = 0.0
    for i, j in itertools.product(range(len(radii)), repeat=2):
        need = max(need, (radii[i] + radii[j]) / dist[i, j])
    return need


def charge_balanced_assignments(template, pool):
    """Every injective role → species map with zero net formal charge."""
    roles = template.roles
    out = []
    for species in itertools.permutations(pool, len(roles)):
        charge = sum(ION_CHARGE[s] * template.multiplicity(r) for r, s in zip(roles, species))
        if charge != 0:
            continue
        cations = [s for s in species if ION_CHARGE[s] > 0]
        anions = [s for s in species if ION_CHARGE[s] < 0]
        if not cations or not anions:
            continue
        en = lambda s: elements.electronegativity(elements.atomic_number(s))  # noqa: E731
        if max(en(s) for s in cations) >= min(en(s) for s in anions):
            continue
        out.append(dict(zip(roles, species)))
    return out


def build_template_crystal(template, assignment, scale=1.0, rng=None, jitter=0.0):
    a = contact_lattice_constant(template, assignment) * scale
    lattice = template.lattice * a
    frac = template.frac_coords()
    coords = frac @ lattice
    if jitter > 0:
        coords = coords + rng.normal(0.0, jitter, size=coords.shape)
    numbers = [elements.atomic_number(assignment[r]) for r, _ in template.sites]
    return Crystal(lattice, coords, numbers, template.space_group)


def template_combinations(spec):
    """Distinct (template, assignment) pairs; structural duplicates removed."""
    combos = []
    for name in spec.templates:
        template = TEMPLATES[name]
        protos = []
        for assignment in charge_balanced_assignments(template, spec.species_pool):
            proto = build_template_crystal(template, assignment)
            if any(structures_match(proto, p) for p in protos):
                continue
            protos.append(proto)
            combos.append((name, assignment))
    return combos


def split_combinations(spec, seed):
    """(kept, withheld) combination lists under ``spec.holdout_fraction``."""
    combos = template_combinations(spec)
    rng = np.random.default_rng([seed, 7])
    n_out = int(round(spec.holdout_fraction * len(combos)))
    withheld = set(rng.permutation(len(combos))[:n_out].tolist())
    kept = [c for k, c in enumerate(combos) if k not in withheld]
    held = [c for k, c in enumerate(combos) if k in withheld]
    return kept, held


def make_synthetic_dataset(spec, seed):
    """``spec.count`` jittered template crystals with space-group labels."""
    kept, _ = split_combinations(spec, seed)
    if not kept:
        raise ValueError("no charge-balanced template assignment exists for this species pool")
    by_template = {}
    for name, assignment in kept:
        by_template.setdefault(name, []).append(assignment)
    names = sorted(by_template, key=spec.templates.index)
    rng = np.random.default_rng(seed)
    crystals = []
    for _ in range(spec.count):
        name = names[rng.integers(len(names))]
        options = by_template[name]
        assignment = options[rng.integers(len(options))]
        scale = rng.uniform(*spec.lattice_scale)
        crystals.append(build_template_crystal(TEMPLATES[name], assignment, scale, rng, spec.jitter))
    return crystals
