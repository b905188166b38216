import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crystalconcepts.crystal import Crystal
from crystalconcepts.evaluation import (
    AGGREGATE_COLUMNS,
    STABILITY_THRESHOLD,
    ToyStabilityOracle,
    check_validity,
    composition_valid,
    compute_metrics,
    min_periodic_distance,
)
from crystalconcepts.matcher import structures_match
from crystalconcepts.synthetic import TEMPLATES, build_template_crystal

from conftest import random_rotation, rock_salt
from oracles import naive_metrics


def template(name, a, b, scale=1.05):
    return build_template_crystal(TEMPLATES[name], {"A": a, "B": b}, scale)


def disguise(c, rng):
    """Same structure under a random rotation, translation and atom order."""
    R = random_rotation(rng)
    perm = rng.permutation(c.num_atoms)
    coords = (c.cart_coords + rng.normal(size=3)) @ R.T
    return Crystal(c.lattice @ R.T, coords[perm], c.atomic_numbers[perm])


# -- validity -----------------------------------------------------------------

def test_close_pair_is_invalid():
    c = Crystal(np.eye(3) * 5.0, [[0, 0, 0], [0.3, 0, 0]], [11, 17])
    result = check_validity(c)
    assert not result.valid and "min-distance" in result.reasons
    assert result.compositional


def test_tiny_volume_is_invalid():
    c = Crystal(np.eye(3) * 0.05 ** (1 / 3), [[0, 0, 0]], [29])
    assert "volume" in check_validity(c).reasons


def test_rock_salt_is_valid():
    assert check_validity(rock_salt()).valid


def test_min_distance_includes_self_images():
    assert min_periodic_distance(Crystal(np.eye(3) * 3.0, [[0, 0, 0]], [29])) == pytest.approx(3.0)
    assert min_periodic_distance(rock_salt(a=5.0)) == pytest.approx(2.5)


@pytest.mark.parametrize("numbers, expected", [
    ([11, 17], True),       # NaCl
    ([12, 8], True),        # MgO
    ([11, 17, 17], False),  # NaCl2 cannot balance
    ([29], True),           # single element
    ([11, 19], True),       # all-metal
    ([11, 12, 17], False),
    ([20, 9, 9], True),     # CaF2
])
def test_composition_examples(numbers, expected):
    assert composition_valid(numbers) == expected


def test_composition_invariant_to_multiplicity():
    assert composition_valid([11, 17] * 3) and composition_valid([20, 9, 9] * 2)


# -- toy oracle ---------------------------------------------------------------

def test_separated_atoms_have_zero_energy():
    oracle = ToyStabilityOracle()
    assert oracle.energy(template("rock-salt", "Na", "Cl")) == 0.0


def test_overlap_energy_decreases_under_relaxation():
    c = Crystal(np.eye(3) * 6.0, [[0, 0, 0], [1.0, 0.2, 0.1]], [11, 17])
    oracle = ToyStabilityOracle()
    e0 = oracle.energy(c)
    relaxed = oracle.relax(c)
    assert e0 > 0
    assert oracle.energy(relaxed) < e0
    assert np.array_equal(relaxed.lattice, c.lattice)


def test_relax_is_deterministic():
    c = Crystal(np.eye(3) * 6.0, [[0, 0, 0], [1.0, 0.2, 0.1], [3, 3, 3]], [11, 17, 17])
    oracle = ToyStabilityOracle()
    assert np.array_equal(oracle.relax(c).cart_coords, oracle.relax(c).cart_coords)


def test_unknown_formula_flags_no_reference():
    e, flags = ToyStabilityOracle().energy_above_hull(rock_salt())
    assert e == 0.0 and flags == ("no-reference",)


def test_reference_member_sits_on_hull():
    ref = template("rock-salt", "K", "Cl")
    oracle = ToyStabilityOracle([ref])
    e, flags = oracle.energy_above_hull(oracle.relax(ref))
    assert e == pytest.approx(0.0) and flags == ()


def test_compressed_cell_is_above_hull():
    oracle = ToyStabilityOracle([template("rock-salt", "K", "Cl")])
    e, _ = oracle.energy_above_hull(oracle.relax(template("rock-salt", "K", "Cl", scale=0.55)))
    assert e > STABILITY_THRESHOLD


# -- metrics on constructed fixtures -------------------------------------------

REFERENCE = [template("rock-salt", "K", "Cl")]

# name -> (builder, valid, stable, novel)
KINDS = {
    "nacl": (lambda: template("rock-salt", "Na", "Cl"), True, True, True),
    "kbr": (lambda: template("cscl", "K", "Br"), True, True, True),
    "mgo": (lambda: template("rock-salt", "Mg", "O"), True, True, True),
    "nabr-hex": (lambda: template("hexagonal-ab", "Na", "Br"), True, True, True),
    "bad-composition": (lambda: Crystal.from_fractional(np.eye(3) * 6.0, [[0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]],
                                                        [11, 12, 17]), False, True, True),
    "too-close": (lambda: Crystal(np.eye(3) * 5.0, [[0, 0, 0], [0.3, 0, 0]], [11, 35]), False, True, True),
    "known": (lambda: template("rock-salt", "K", "Cl"), True, True, False),
    "unstable": (lambda: template("rock-salt", "K", "Cl", scale=0.55), True, False, True),
}


def build_fixture(seed):
    """Crystals plus expected flags; repeats of a kind are disguised duplicates."""
    rng = np.random.default_rng(seed)
    names = list(KINDS)
    picks = [names[k] for k in rng.integers(len(names), size=int(rng.integers(5, 10)))]
    crystals, expected, seen = [], [], set()
    for name in picks:
        build, v, s, n = KINDS[name]
        crystals.append(disguise(build(), rng))
        expected.append((v, s, name not in seen, n))
        seen.add(name)
    return crystals, expected


@pytest.fixture(scope="module")
def oracle():
    return ToyStabilityOracle(REFERENCE)


@pytest.mark.parametrize("seed", range(20))
def test_fixture_flags(seed, oracle):
    crystals, expected = build_fixture(seed)
    m = compute_metrics(crystals, REFERENCE, oracle)
    got = list(zip(m.valid.tolist(), m.stable.tolist(), m.unique.tolist(), m.novel.tolist()))
    assert got == expected

    V, S, U, N = naive_metrics(
        crystals, REFERENCE,
        lambda c: check_validity(c).valid,
        lambda c: oracle.energy_above_hull(oracle.relax(c))[0] <= STABILITY_THRESHOLD,
        structures_match,
    )
    assert (V, S, U, N) == tuple(map(list, zip(*got)))

    agg = m.aggregates
    v, s, u, n = (np.array(x) for x in (V, S, U, N))
    assert agg["V"] == pytest.approx(v.mean())
    assert agg["S"] == pytest.approx((v & s).mean())
    assert agg["N"] == pytest.approx((v & n).mean())
    assert agg["S.U.N"] == pytest.approx((s & u & n).mean())
    assert agg["V.S.U.N"] == pytest.approx((v & s & u & n).mean())
    assert agg["V.S.U.N"] <= agg["S.U.N"]
    assert agg["V.S.U.N"] <= min(agg["V"], agg["S"], agg["U"], agg["N"])


def test_four_crystal_tally(oracle):
    rng = np.random.default_rng(0)
    nacl = KINDS["nacl"][0]()
    crystals = [nacl, disguise(nacl, rng), KINDS["bad-composition"][0](), KINDS["known"][0]()]
    m = compute_metrics(crystals, REFERENCE, oracle)
    assert m.raw["U"] == 0.75
    assert m.aggregates["V.S.U.N"] == 0.25
    assert m.aggregates["U"] == 0.5


def test_empty_reference_makes_everything_novel(oracle):
    crystals, _ = build_fixture(1)
    assert compute_metrics(crystals, [], oracle).novel.all()


def test_reference_is_not_novel(oracle):
    crystals = [KINDS["nacl"][0](), KINDS["mgo"][0]()]
    m = compute_metrics(crystals, crystals, ToyStabilityOracle(crystals))
    assert m.aggregates["N"] == 0.0


def test_failed_decodes_get_false_flags(oracle):
    m = compute_metrics([None, KINDS["nacl"][0]()], REFERENCE, oracle)
    assert not (m.valid[0] or m.stable[0] or m.unique[0] or m.novel[0])
    assert m.valid[1] and m.unique[1]
    assert m.reasons[0] == ("decode-failed",)


def test_empty_input(oracle):
    m = compute_metrics([], REFERENCE, oracle)
    assert m.count == 0 and all(v == 0.0 for v in m.aggregates.values())


def test_uniqueness_ignores_order_of_kinds(oracle):
    rng = np.random.default_rng(5)
    nacl = KINDS["nacl"][0]()
    crystals = [nacl, KINDS["mgo"][0](), disguise(nacl, rng), disguise(nacl, rng)]
    assert compute_metrics(crystals, REFERENCE, oracle).unique.tolist() == [True, True, False, False]


@given(st.integers(0, 10_000))
def test_aggregate_identities_hold(seed):
    crystals, _ = build_fixture(seed)
    agg = compute_metrics(crystals, REFERENCE, ToyStabilityOracle(REFERENCE)).aggregates
    assert agg["V.S.U.N"] <= agg["S.U.N"] + 1e-12
    assert agg["V.S.U.N"] <= min(agg["V"], agg["S"], agg["U"], agg["N"]) + 1e-12


def test_report_files(tmp_path, oracle):
    crystals, _ = build_fixture(2)
    m = compute_metrics(crystals, REFERENCE, oracle)
    m.to_json(tmp_path / "m.json")
    m.to_csv(tmp_path / "m.csv")
    data = json.loads((tmp_path / "m.json").read_text())
    assert set(data["aggregates"]) == set(AGGREGATE_COLUMNS)
    assert len(data["crystals"]) == len(crystals)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0][:5] == ["index", "valid", "stable", "unique", "novel"]
    assert len(rows) == len(crystals) + 1
