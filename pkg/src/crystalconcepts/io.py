"""Dataset ingestion: canonical JSON-lines records and a small CIF subset.

The CIF reader understands the six ``_cell_*`` parameters, an optional
space-group number, and one ``loop_`` block with ``_atom_site_type_symbol``
(or ``_atom_site_label``) and ``_atom_site_fract_x/y/z``.  Symmetry operators
are not applied; files are expected to list every site of the cell.
"""

from __future__ import annotations

import json
import logging
import math
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import elements
from .crystal import Crystal, image_coverage_ok
from .errors import CrystalConceptsError, TooManyAtoms

log = logging.getLogger(__name__)

MAX_ATOMS = 20


def read_jsonl(path):
    crystals = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                crystals.append(Crystal.from_record(json.loads(line)))
    return crystals


def write_jsonl(crystals, path):
    with open(path, "w") as fh:
        for c in crystals:
            fh.write(json.dumps(c.to_record()) + "\n")


def lattice_from_parameters(a, b, c, alpha, beta, gamma):
    """Row-vector lattice with ``a`` along x and ``b`` in the xy-plane."""
    al, be, ga = (math.radians(t) for t in (alpha, beta, gamma))
    bx, by = b * math.cos(ga), b * math.sin(ga)
    cx = c * math.cos(be)
    cy = c * (math.cos(al) - math.cos(be) * math.cos(ga)) / math.sin(ga)
    cz2 = c * c - cx * cx - cy * cy
    if cz2 <= 0:
        raise ValueError("cell angles do not describe a valid cell")
    return np.array([[a, 0.0, 0.0], [bx, by, 0.0], [cx, cy, math.sqrt(cz2)]])


def lattice_parameters(lattice):
    L = np.asarray(lattice, dtype=float)
    a, b, c = np.linalg.norm(L, axis=1)

    def ang(u, v):
        return math.degrees(math.acos(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1, 1)))

    return a, b, c, ang(L[1], L[2]), ang(L[0], L[2]), ang(L[0], L[1])


def _number(token):
    return float(re.sub(r"\(\d+\)$", "", token))


def _species_from_label(label):
    m = re.match(r"([A-Z][a-z]?)", label)
    if not m or m.group(1) not in elements.Z_OF:
        raise ValueError(f"cannot read an element from {label!r}")
    return elements.Z_OF[m.group(1)]


def parse_cif(text):
    tags = {}
    loop_header, loop_rows = [], []
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    k = 0
    while k < len(lines):
        line = lines[k]
        if line.lower() == "loop_":
            header, rows = [], []
            k += 1
            while k < len(lines) and lines[k].startswith("_"):
                header.append(lines[k].lower())
                k += 1
            while k < len(lines) and lines[k] and not lines[k].startswith(("_", "loop_", "data_")):
                rows.append(shlex.split(lines[k]))
                k += 1
            if any(h.startswith("_atom_site_fract") for h in header):
                loop_header, loop_rows = header, rows
            continue
        if line.startswith("_"):
            parts = line.split(None, 1)
            if len(parts) == 2:
                tags[parts[0].lower()] = parts[1].strip().strip("'\"")
        k += 1

    try:
        params = [_number(tags[f"_cell_{n}"]) for n in
                  ("length_a", "length_b", "length_c", "angle_alpha", "angle_beta", "angle_gamma")]
    except KeyError as exc:
        raise ValueError(f"missing cell parameter {exc.args[0]}") from None
    if not loop_header:
        raise ValueError("no atom_site loop with fractional coordinates")
    col = {h: n for n, h in enumerate(loop_header)}
    species_col = col.get("_atom_site_type_symbol", col.get("_atom_site_label"))
    if species_col is None:
        raise ValueError("atom_site loop has neither type_symbol nor label")
    frac, numbers = [], []
    for row in loop_rows:
        if len(row) != len(loop_header):
            raise ValueError(f"malformed atom_site row {row}")
        numbers.append(_species_from_label(row[species_col]))
        frac.append([_number(row[col[f"_atom_site_fract_{ax}"]]) for ax in "xyz"])
    sg = None
    for key in ("_space_group_it_number", "_symmetry_int_tables_number"):
        if key in tags:
            sg = int(tags[key])
    lattice = lattice_from_parameters(*params)
    return Crystal.from_fractional(lattice, np.array(frac), numbers, sg)


def format_cif(crystal, name="crystal"):
    a, b, c, al, be, ga = lattice_parameters(crystal.lattice)
    out = [f"data_{name}"]
    for tag, val in zip(("length_a", "length_b", "length_c", "angle_alpha", "angle_beta", "angle_gamma"),
                        (a, b, c, al, be, ga)):
        out.append(f"_cell_{tag} {val:.10f}")
    if crystal.space_group is not None:
        out.append(f"_space_group_IT_number {crystal.space_group}")
    out += ["loop_", "_atom_site_label", "_atom_site_type_symbol",
            "_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"]
    for n, (z, f) in enumerate(zip(crystal.atomic_numbers, crystal.frac_coords)):
        sym = elements.symbol(z)
        out.append(f"{sym}{n + 1} {sym} {f[0]:.10f} {f[1]:.10f} {f[2]:.10f}")
    return "\n".join(out) + "\n"


def validate(crystal, max_atoms=MAX_ATOMS):
    if crystal.num_atoms > max_atoms:
        raise TooManyAtoms(f"{crystal.num_atoms} atoms exceeds the limit of {max_atoms}")
    if not image_coverage_ok(crystal):
        raise CrystalConceptsError("cell too thin for the {-2..2}^3 periodic image search")
    return crystal


@dataclass
class IngestResult:
    crystals: list = field(default_factory=list)
    # (source, message) per rejected file or record
    errors: list = field(default_factory=list)


def _sources(path, fmt):
    path = Path(path)
    if path.is_dir():
        suffix = ".cif" if fmt == "cif-subset" else ".jsonl"
        return sorted(path.glob(f"*{suffix}"))
    return [path]


def ingest(path, fmt="jsonl", strict=False, max_atoms=MAX_ATOMS):
    """Read and validate crystals from a file or a directory of files.

    Bad files (or bad JSON-lines records) are reported in ``errors`` and
    skipped; with ``strict=True`` the first failure is raised instead.
    Source files are only ever opened for reading.
    """
    if fmt not in ("jsonl", "cif-subset"):
        raise ValueError(f"unknown format {fmt!r}")
    result = IngestResult()

    def reject(source, exc):
        if strict:
            raise exc
        log.warning("skipping %s: %s", source, exc)
        result.errors.append((str(source), f"{type(exc).__name__}: {exc}"))

    for src in _sources(path, fmt):
        if fmt == "cif-subset":
            try:
                result.crystals.append(validate(parse_cif(src.read_text()), max_atoms))
            except (ValueError, CrystalConceptsError) as exc:
                reject(src, exc)
            continue
        with open(src) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    result.crystals.append(validate(Crystal.from_record(json.loads(line)), max_atoms))
                except (ValueError, KeyError, TypeError, CrystalConceptsError) as exc:
                    reject(f"{src}:{lineno}", exc)
    return result
