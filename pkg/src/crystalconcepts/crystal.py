"""Crystal records, lattice reparameterization and local environments.

Conventions
-----------
Lattice matrices store cell vectors as rows, so Cartesian coordinates are
``X = F @ L`` for fractional coordinates ``F``.

The SVD factorization ``L = U @ L_tilde`` (``U = W Vᵀ``, ``L_tilde = V Σ Vᵀ``)
is a statement about column vectors.  For a crystal we therefore factor
``Lᵀ``: the symmetric factor then describes the same cell as ``L`` and ``U``
is the spatial rotation taking the crystal into that canonical frame.  All
model-facing representations (atom vectors, local environments) are built in
this canonical frame, where ``lattice == L_tilde`` and coordinates are
``X @ U``.  For a lattice that is already symmetric positive definite the frame
is the identity.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DecodeFailed, DegenerateLattice, InvalidSpecies

NUM_SPECIES = 100
COORD_SLICE = slice(0, 3)
SPECIES_SLICE = slice(3, 3 + NUM_SPECIES)
LATTICE_SLICE = slice(3 + NUM_SPECIES, 3 + NUM_SPECIES + 6)
ATOM_VECTOR_DIM = 3 + NUM_SPECIES + 6

DEFAULT_XI = 1.1
DEFAULT_K = 12

# Integer translations searched for periodic images: {-2..2}^3.
IMAGE_SHIFTS = np.array(list(itertools.product(range(-2, 3), repeat=3)), dtype=float)
_ZERO_SHIFT = int(np.flatnonzero(~IMAGE_SHIFTS.any(axis=1))[0])

_TRIU = np.triu_indices(3)


@dataclass(frozen=True, eq=False)
class Crystal:
    """A unit cell: row-vector lattice (Å), Cartesian coordinates (Å), species."""

    lattice: np.ndarray
    cart_coords: np.ndarray
    atomic_numbers: np.ndarray
    space_group: int | None = None

    def __post_init__(self):
        lattice = np.array(self.lattice, dtype=float).reshape(3, 3)
        coords = np.array(self.cart_coords, dtype=float).reshape(-1, 3)
        numbers = np.array(self.atomic_numbers, dtype=np.int64).reshape(-1)
        if len(numbers) < 1:
            raise ValueError("a crystal needs at least one atom")
        if len(numbers) != len(coords):
            raise ValueError(f"{len(coords)} coordinates for {len(numbers)} atoms")
        if numbers.min() < 1 or numbers.max() > NUM_SPECIES:
            raise InvalidSpecies(f"atomic numbers must lie in [1, 100], got {numbers.tolist()}")
        if not np.all(np.isfinite(lattice)) or abs(np.linalg.det(lattice)) <= 1e-10:
            raise DegenerateLattice("lattice is singular or non-finite")
        if not np.all(np.isfinite(coords @ np.linalg.inv(lattice))):
            raise DegenerateLattice("fractional coordinates are not finite")
        if self.space_group is not None and not 1 <= int(self.space_group) <= 230:
            raise ValueError(f"space group {self.space_group} outside 1-230")
        for arr in (lattice, coords, numbers):
            arr.setflags(write=False)
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "cart_coords", coords)
        object.__setattr__(self, "atomic_numbers", numbers)
        if self.space_group is not None:
            object.__setattr__(self, "space_group", int(self.space_group))

    @classmethod
    def from_fractional(cls, lattice, frac_coords, atomic_numbers, space_group=None):
        lattice = np.asarray(lattice, dtype=float)
        return cls(lattice, np.asarray(frac_coords, dtype=float) @ lattice, atomic_numbers, space_group)

    @property
    def num_atoms(self):
        return len(self.atomic_numbers)

    @property
    def frac_coords(self):
        return self.cart_coords @ np.linalg.inv(self.lattice)

    @property
    def volume(self):
        return abs(float(np.linalg.det(self.lattice)))

    def wrapped(self):
        """Same crystal with fractional coordinates folded into [0, 1)."""
        frac = self.frac_coords % 1.0
        frac[frac >= 1.0] = 0.0
        return Crystal(self.lattice, frac @ self.lattice, self.atomic_numbers, self.space_group)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return Crystal(self.lattice, self.cart_coords[perm], self.atomic_numbers[perm], self.space_group)

    def to_record(self):
        record = {
            "lattice": self.lattice.reshape(-1).tolist(),
            "cart_coords": self.cart_coords.tolist(),
            "atomic_numbers": self.atomic_numbers.tolist(),
        }
        if self.space_group is not None:
            record["space_group"] = self.space_group
        return record

    @classmethod
    def from_record(cls, record):
        return cls(
            np.asarray(record["lattice"], dtype=float).reshape(3, 3),
            np.asarray(record["cart_coords"], dtype=float).reshape(-1, 3),
            record["atomic_numbers"],
            record.get("space_group"),
        )

    def __repr__(self):
        from .elements import symbol

        counts = {}
        for z in self.atomic_numbers:
            counts[symbol(z)] = counts.get(symbol(z), 0) + 1
        formula = "".join(f"{s}{n if n > 1 else ''}" for s, n in counts.items())
        return f"Crystal({formula}, volume={self.volume:.2f}, sg={self.space_group})"


@dataclass(frozen=True, eq=False)
class ReparamLattice:
    rotation: np.ndarray
    lattice_tilde: np.ndarray
    lattice_hat: np.ndarray


def lattice_hat_of(lattice_tilde):
    """Row-major upper triangle (l11, l12, l13, l22, l23, l33)."""
    return np.asarray(lattice_tilde, dtype=float)[_TRIU].copy()


def lattice_tilde_of(lattice_hat):
    hat = np.asarray(lattice_hat, dtype=float).reshape(6)
    sym = np.zeros((3, 3))
    sym[_TRIU] = hat
    return sym + np.triu(sym, 1).T


def reparameterize_lattice(lattice):
    """Factor ``lattice = U @ L_tilde`` with ``U`` a proper rotation.

    Singular values are taken in descending order.  When the raw SVD gives
    ``det(W Vᵀ) = -1`` the last left singular vector and its singular value
    are negated, which keeps the product exact and ``U`` proper; this only
    happens for left-handed input, where ``L_tilde`` then carries one negative
    eigenvalue.
    """
    L = np.asarray(lattice, dtype=float)
    if L.shape != (3, 3) or not np.all(np.isfinite(L)) or abs(np.linalg.det(L)) <= 1e-10:
        raise DegenerateLattice("lattice is singular or non-finite")
    W, s, Vt = np.linalg.svd(L)
    if np.linalg.det(W @ Vt) < 0:
        W[:, -1] *= -1.0
        s = s.copy()
        s[-1] *= -1.0
    U = W @ Vt
    L_tilde = (Vt.T * s) @ Vt
    L_tilde = 0.5 * (L_tilde + L_tilde.T)
    return ReparamLattice(U, L_tilde, lattice_hat_of(L_tilde))


def right_handed(crystal):
    """Negate a left-handed basis; the lattice and the atoms are unchanged."""
    if np.linalg.det(crystal.lattice) > 0:
        return crystal
    return Crystal(-crystal.lattice, crystal.cart_coords, crystal.atomic_numbers, crystal.space_group)


def canonical_frame(crystal):
    """Rotate ``crystal`` so that its lattice becomes the symmetric factor."""
    c = right_handed(crystal)
    rep = reparameterize_lattice(c.lattice.T)
    return Crystal(rep.lattice_tilde, c.cart_coords @ rep.rotation, c.atomic_numbers, c.space_group)


def lattice_descriptor(crystal):
    """Rotation-invariant 6-vector describing the cell shape."""
    return reparameterize_lattice(right_handed(crystal).lattice.T).lattice_hat


def canonical_atom_order(crystal):
    """Permutation sorting atoms by (atomic number, x, y, z); stable on ties."""
    x, y, z = crystal.cart_coords.T
    return np.lexsort((z, y, x, crystal.atomic_numbers))


def canonicalize(crystal):
    """Canonical frame, coordinates wrapped into the cell, canonical atom order.

    This is the form every model consumes.
    """
    c = canonical_frame(crystal).wrapped()
    return c.permuted(canonical_atom_order(c))


def one_hot(atomic_numbers):
    numbers = np.asarray(atomic_numbers, dtype=np.int64)
    if numbers.size and (numbers.min() < 1 or numbers.max() > NUM_SPECIES):
        raise InvalidSpecies(f"atomic numbers must lie in [1, 100], got {numbers.tolist()}")
    out = np.zeros((len(numbers), NUM_SPECIES))
    out[np.arange(len(numbers)), numbers - 1] = 1.0
    return out


def build_atom_vectors(crystal):
    """``N × 109`` matrix of ``[X_i ‖ one-hot(A_i) ‖ L_hat]`` in the canonical frame."""
    c = canonical_frame(crystal)
    hat = lattice_hat_of(c.lattice)
    return np.hstack([c.cart_coords, one_hot(c.atomic_numbers), np.tile(hat, (c.num_atoms, 1))])


def minimum_image_distance(crystal, i, j):
    """Shortest distance from atom ``i`` to any image of atom ``j`` in {-2..2}^3."""
    images = crystal.cart_coords[j] + IMAGE_SHIFTS @ crystal.lattice
    d = np.linalg.norm(images - crystal.cart_coords[i], axis=1)
    if i == j:
        d[_ZERO_SHIFT] = np.inf
    return float(d.min())


def image_displacements(crystal, i):
    """Displacements from atom ``i`` to every image occurrence of every atom.

    Returns ``(vectors, distances, atom_index, shift_index)`` with the
    self-occurrence at zero shift removed.
    """
    shifts = IMAGE_SHIFTS @ crystal.lattice
    vec = crystal.cart_coords[None, :, :] + shifts[:, None, :] - crystal.cart_coords[i]
    vec = vec.reshape(-1, 3)
    n = crystal.num_atoms
    atom = np.tile(np.arange(n), len(shifts))
    shift = np.repeat(np.arange(len(shifts)), n)
    keep = ~((atom == i) & (shift == _ZERO_SHIFT))
    vec, atom, shift = vec[keep], atom[keep], shift[keep]
    return vec, np.linalg.norm(vec, axis=1), atom, shift


@dataclass(frozen=True, eq=False)
class LocalEnvironment:
    """Center atom plus up to ``K`` minimum-distance-rule neighbors.

    ``rows`` is ``(1+K) × 109``; ``pad_mask[r]`` is True for padding rows.
    ``neighbor_atoms``/``neighbor_shifts``/``distances`` describe the kept
    image occurrences in row order.
    """

    rows: np.ndarray
    pad_mask: np.ndarray
    valid_count: int
    center_index: int
    neighbor_atoms: np.ndarray
    neighbor_shifts: np.ndarray
    distances: np.ndarray


def find_local_environment(crystal, i, xi=DEFAULT_XI, K=DEFAULT_K):
    if xi < 1:
        raise ValueError(f"xi must be >= 1, got {xi}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    c = canonical_frame(crystal)
    vec, dist, atom, shift = image_displacements(c, i)
    if len(dist) == 0 or not np.isfinite(dist).any():
        raise DegenerateLattice("no periodic image within the searched range")
    d_min = dist.min()
    keep = np.flatnonzero(dist <= xi * d_min)
    rank = np.empty(c.num_atoms, dtype=np.int64)
    rank[canonical_atom_order(c)] = np.arange(c.num_atoms)
    order = np.lexsort((shift[keep], rank[atom[keep]], dist[keep]))
    keep = keep[order][:K]

    hat = lattice_hat_of(c.lattice)
    rows = np.zeros((1 + K, ATOM_VECTOR_DIM))
    rows[0, COORD_SLICE] = c.cart_coords[i]
    rows[0, SPECIES_SLICE] = one_hot([c.atomic_numbers[i]])[0]
    rows[0, LATTICE_SLICE] = hat
    m = len(keep)
    rows[1:1 + m, COORD_SLICE] = c.cart_coords[i] + vec[keep]
    rows[1:1 + m, SPECIES_SLICE] = one_hot(c.atomic_numbers[atom[keep]])
    rows[1:1 + m, LATTICE_SLICE] = hat
    pad = np.ones(1 + K, dtype=bool)
    pad[:1 + m] = False
    return LocalEnvironment(
        rows=rows,
        pad_mask=pad,
        valid_count=1 + m,
        center_index=int(i),
        neighbor_atoms=atom[keep],
        neighbor_shifts=IMAGE_SHIFTS[shift[keep]].astype(np.int64),
        distances=dist[keep],
    )


def local_environments(crystal, xi=DEFAULT_XI, K=DEFAULT_K):
    return [find_local_environment(crystal, i, xi, K) for i in range(crystal.num_atoms)]


def image_coverage_ok(crystal, xi=DEFAULT_XI):
    """Whether the {-2..2}^3 search is guaranteed to contain every neighbor.

    Any image outside the searched block lies at least two interplanar
    spacings away from an atom inside the cell.
    """
    c = right_handed(crystal).wrapped()
    inv = np.linalg.inv(c.lattice)
    spacing = 1.0 / np.linalg.norm(inv, axis=0)
    reach = 2.0 * spacing.min()
    for i in range(c.num_atoms):
        _, dist, _, _ = image_displacements(c, i)
        if xi * dist.min() > reach:
            return False
    return True


def lattice_from_hat(lattice_hat, min_eigenvalue=1e-3):
    """Symmetric lattice from a 6-vector; raises ``DecodeFailed`` unless PD."""
    L = lattice_tilde_of(lattice_hat)
    if not np.all(np.isfinite(L)):
        raise DecodeFailed("non-finite lattice block")
    if np.linalg.eigvalsh(L).min() < min_eigenvalue:
        raise DecodeFailed("decoded lattice is not positive definite")
    return L
