import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from crystalconcepts.composition import composition_from_codes
from crystalconcepts.crystal import ATOM_VECTOR_DIM, LATTICE_SLICE, SPECIES_SLICE, build_atom_vectors, canonicalize
from crystalconcepts.errors import ConfigError, DecodeFailed, TooManyAtoms
from crystalconcepts.generator import (
    BaseModel,
    BaseModelConfig,
    Standardizer,
    build_denoiser,
    crystal_to_training_tensor,
    decode_sample,
    generate,
    train_base_model,
)
from crystalconcepts.matcher import structures_match

from conftest import random_crystal, rock_salt, simple_cubic

TINY = BaseModelConfig(layers=1, hidden=32, heads=2, steps=8, max_atoms=8, batch_size=8, epochs=2)


@pytest.fixture(scope="module")
def compositions(small_dataset, tiny_vqvae):
    out = []
    for c in small_dataset:
        idx, _ = tiny_vqvae.assign(tiny_vqvae.encode_crystal(c))
        out.append(composition_from_codes(idx, tiny_vqvae.codes))
    return out


@pytest.fixture(scope="module")
def conditional(small_dataset, compositions):
    return train_base_model(small_dataset, compositions, TINY, seed=0)


@pytest.fixture(scope="module")
def unconditional(small_dataset):
    return train_base_model(small_dataset, None, TINY, seed=0)


# -- tensors and decoding -----------------------------------------------------

def test_single_atom_tensor():
    x, live = crystal_to_training_tensor(simple_cubic(), max_atoms=4)
    assert x.shape == (4, ATOM_VECTOR_DIM)
    assert live.tolist() == [True, False, False, False]
    assert not x[1:].any()
    assert x[0, SPECIES_SLICE].sum() == 1.0


def test_too_many_atoms():
    with pytest.raises(TooManyAtoms):
        crystal_to_training_tensor(random_crystal(np.random.default_rng(0), n_atoms=5), max_atoms=4)


@given(st.integers(0, 10_000))
def test_tensor_ignores_atom_order(seed):
    rng = np.random.default_rng(seed)
    c = random_crystal(rng)
    a, _ = crystal_to_training_tensor(c, max_atoms=8)
    b, _ = crystal_to_training_tensor(c.permuted(rng.permutation(c.num_atoms)), max_atoms=8)
    assert np.allclose(a, b, atol=1e-9)


def test_standardizer_round_trip(small_dataset):
    rows = np.concatenate([build_atom_vectors(canonicalize(c)) for c in small_dataset])
    st_ = Standardizer.fit(rows)
    scaled = st_.apply(rows)
    assert np.allclose(st_.invert(scaled), rows)
    assert np.array_equal(scaled[:, SPECIES_SLICE], rows[:, SPECIES_SLICE])
    assert np.allclose(scaled[:, LATTICE_SLICE].mean(axis=0), 0.0, atol=1e-9)


@given(st.integers(0, 10_000))
def test_decode_inverts_the_atom_vectors(seed):
    c = random_crystal(np.random.default_rng(seed), species=(11, 17))
    assert structures_match(c, decode_sample(build_atom_vectors(canonicalize(c))))


def test_species_tie_goes_to_lowest_number():
    rows = build_atom_vectors(canonicalize(simple_cubic()))
    rows[0, SPECIES_SLICE] = 0.0
    rows[0, SPECIES_SLICE.start + 10] = 0.7
    rows[0, SPECIES_SLICE.start + 16] = 0.7
    assert decode_sample(rows).atomic_numbers.tolist() == [11]


def test_lattice_rows_are_averaged():
    c = canonicalize(rock_salt())
    rows = build_atom_vectors(c)
    noise = np.random.default_rng(0).normal(0, 0.05, size=6)
    rows[0, LATTICE_SLICE] += noise
    rows[1, LATTICE_SLICE] -= noise
    assert np.allclose(decode_sample(rows).lattice, c.lattice, atol=0.01)


def test_decode_failures():
    rows = build_atom_vectors(canonicalize(simple_cubic()))
    bad = rows.copy()
    bad[0, LATTICE_SLICE] = [-1, 0, 0, 1, 0, 1]
    with pytest.raises(DecodeFailed):
        decode_sample(bad)
    bad = rows.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DecodeFailed):
        decode_sample(bad)
    with pytest.raises(DecodeFailed):
        decode_sample(np.zeros((0, ATOM_VECTOR_DIM)))


# -- denoiser wiring ----------------------------------------------------------

def test_denoiser_shapes():
    net = build_denoiser(TINY, cond_dim=4)
    x = torch.randn(3, 8, ATOM_VECTOR_DIM)
    out = net(x, torch.tensor([1, 2, 3]), torch.randn(3, 8, 4), torch.zeros(3, dtype=torch.bool))
    assert out.shape == x.shape
    with pytest.raises(ConfigError):
        net(x, torch.tensor([1, 2, 3]), torch.randn(3, 8, 5), None)


def test_position_vectors_break_row_symmetry():
    torch.manual_seed(0)
    net = build_denoiser(TINY)
    x = torch.randn(1, 1, ATOM_VECTOR_DIM).expand(1, 8, ATOM_VECTOR_DIM)
    out = net(x, torch.tensor([4]))
    assert not torch.allclose(out[0, 0], out[0, 1])


def test_unconditional_model_ignores_conditions(unconditional):
    x = torch.randn(2, 8, ATOM_VECTOR_DIM)
    s = torch.tensor([2, 5])
    a = unconditional.denoiser(x, s, torch.randn(2, 8, 4), torch.zeros(2, dtype=torch.bool), None)
    b = unconditional.denoiser(x, s, None, None, None)
    assert torch.equal(a, b)


def test_unconditional_model_refuses_compositions(unconditional, compositions):
    with pytest.raises(ConfigError):
        generate(unconditional, 2, compositions[:2])


def test_training_rejects_size_mismatch(small_dataset, tiny_vqvae):
    crystal = small_dataset[0]
    wrong = composition_from_codes([0] * (crystal.num_atoms + 1), tiny_vqvae.codes)
    with pytest.raises(ConfigError):
        train_base_model([crystal], [wrong], TINY, 0)
    with pytest.raises(ConfigError):
        train_base_model(small_dataset[:2], [wrong], TINY, 0)


# -- generation ---------------------------------------------------------------

def test_atom_counts_follow_compositions(conditional, compositions):
    chosen = compositions[:3]
    out = generate(conditional, 10, chosen, seed=1)
    expected = [chosen[i % 3].n_atoms for i in range(10)]
    assert [None if c is None else c.num_atoms for c in out] == \
        [None if c is None else n for c, n in zip(out, expected)]
    _, raw = generate(conditional, 10, chosen, seed=1, return_raw=True)
    assert [len(r) for r in raw] == expected


def test_zero_guidance_never_uses_the_null_condition(conditional, compositions):
    a = generate(conditional, 3, compositions[:3], omega=0.0, seed=2, return_raw=True)[1]
    saved = conditional.net.null.detach().clone()
    with torch.no_grad():
        conditional.net.null.add_(100.0)
    try:
        b = generate(conditional, 3, compositions[:3], omega=0.0, seed=2, return_raw=True)[1]
    finally:
        with torch.no_grad():
            conditional.net.null.copy_(saved)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_generation_is_seeded(unconditional):
    a = generate(unconditional, 4, seed=3, return_raw=True)[1]
    b = generate(unconditional, 4, seed=3, return_raw=True)[1]
    c = generate(unconditional, 4, seed=4, return_raw=True)[1]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, c))


def test_zero_samples(unconditional):
    assert generate(unconditional, 0) == []


def test_checkpoint_round_trip(conditional, compositions, tmp_path):
    conditional.save(tmp_path / "b.pt", seed=0)
    loaded = BaseModel.load(tmp_path / "b.pt")
    assert loaded.conditional and loaded.cond_dim == conditional.cond_dim
    a = generate(conditional, 3, compositions[:3], seed=5, return_raw=True)[1]
    b = generate(loaded, 3, compositions[:3], seed=5, return_raw=True)[1]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_training_is_deterministic(small_dataset, compositions, conditional):
    again = train_base_model(small_dataset, compositions, TINY, seed=0)
    for k, v in conditional.net.state_dict().items():
        assert torch.equal(v, again.net.state_dict()[k]), k


def test_config_validation():
    with pytest.raises(ConfigError):
        BaseModelConfig(hidden=30, heads=4)
    with pytest.raises(ConfigError):
        BaseModelConfig(cond_drop_prob=1.5)
    with pytest.raises(ConfigError):
        BaseModelConfig(lr_schedule="linear")


def test_cosine_schedule_changes_training_but_stays_deterministic(small_dataset, compositions, conditional):
    cosine = dataclasses.replace(TINY, lr_schedule="cosine")
    a = train_base_model(small_dataset, compositions, cosine, seed=0)
    b = train_base_model(small_dataset, compositions, cosine, seed=0)
    state = conditional.net.state_dict()
    assert all(torch.equal(v, b.net.state_dict()[k]) for k, v in a.net.state_dict().items())
    assert not all(torch.equal(v, state[k]) for k, v in a.net.state_dict().items())
