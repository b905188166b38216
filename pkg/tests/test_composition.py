import numpy as np
import pytest
import torch

from crystalconcepts.codebook import quantize_rows
from crystalconcepts.composition import (
    Composition,
    CompositionGenerator,
    GeneratorConfig,
    LatentMatrix,
    SizeDistribution,
    composition_from_codes,
    extract_latent_matrices,
    filter_vsun,
    pad_rows,
    read_pool,
    refine_generator,
    sample_compositions,
    train_composition_generator,
    write_pool,
)
from crystalconcepts.errors import ConfigError, InsufficientData, RefinementSkipped, TooManyAtoms
from crystalconcepts.evaluation import ToyStabilityOracle

from oracles import nearest_code

TINY = GeneratorConfig(layers=1, hidden=32, heads=2, steps=10, max_atoms=8, batch_size=8, epochs=2,
                       refine_epochs=1)


@pytest.fixture(scope="module")
def latents(small_dataset, tiny_vqvae):
    return extract_latent_matrices(small_dataset, tiny_vqvae)


@pytest.fixture(scope="module")
def generator(latents):
    return train_composition_generator(latents, TINY, seed=0)


def test_one_matrix_per_crystal(small_dataset, latents):
    assert len(latents) == len(small_dataset)
    for c, lm in zip(small_dataset, latents):
        assert lm.n_atoms == c.num_atoms
        assert lm.Z.shape[1] == 4


def test_single_crystal(small_dataset, tiny_vqvae):
    out = extract_latent_matrices(small_dataset[:1], tiny_vqvae)
    assert len(out) == 1 and out[0].n_atoms == small_dataset[0].num_atoms


def test_duplicate_crystals_give_identical_matrices(small_dataset, tiny_vqvae):
    a, b = extract_latent_matrices([small_dataset[0], small_dataset[0]], tiny_vqvae)
    assert np.array_equal(a.Z, b.Z)


def test_rows_quantize_like_per_atom_path(small_dataset, tiny_vqvae, latents):
    for c, lm in zip(small_dataset[:5], latents):
        idx, _ = tiny_vqvae.assign(tiny_vqvae.encode_crystal(c))
        via_rows, _ = quantize_rows(lm.Z, tiny_vqvae.codes)
        assert np.array_equal(idx, via_rows)


def test_sampled_rows_are_codebook_rows(generator, tiny_vqvae):
    codes = tiny_vqvae.codes
    comps = sample_compositions(generator, 6, codes, seed=1)
    for comp in comps:
        assert np.array_equal(comp.E, codes[comp.code_indices])
        brute = [nearest_code(z, codes)[0] for z in comp.z]
        assert comp.code_indices.tolist() == brute


def test_constant_size_sampler(generator, tiny_vqvae):
    comps = sample_compositions(generator, 5, tiny_vqvae.codes, SizeDistribution.constant(3), seed=2)
    assert [c.n_atoms for c in comps] == [3] * 5


def test_size_outside_range_rejected(generator, tiny_vqvae):
    with pytest.raises(ConfigError):
        sample_compositions(generator, 2, tiny_vqvae.codes, SizeDistribution.constant(9))


def test_sampling_is_deterministic(generator, tiny_vqvae):
    a = sample_compositions(generator, 4, tiny_vqvae.codes, seed=3)
    b = sample_compositions(generator, 4, tiny_vqvae.codes, seed=3)
    assert all(np.array_equal(x.z, y.z) for x, y in zip(a, b))


def test_zero_samples(generator, tiny_vqvae):
    assert sample_compositions(generator, 0, tiny_vqvae.codes) == []


def test_training_is_deterministic(latents):
    a = train_composition_generator(latents, TINY, seed=4)
    b = train_composition_generator(latents, TINY, seed=4)
    for (k, v), (_, w) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
        assert torch.equal(v, w), k


def test_training_rejects_bad_input():
    with pytest.raises(InsufficientData):
        train_composition_generator([], TINY, 0)
    with pytest.raises(ConfigError):
        train_composition_generator([LatentMatrix(np.zeros((9, 4)))], TINY, 0)


def test_padding_does_not_change_live_rows():
    x, pad = pad_rows([np.ones((2, 3)), np.full((4, 3), 2.0)], 5, 3)
    assert x.shape == (2, 5, 3)
    assert pad.tolist() == [[False, False, True, True, True], [False] * 4 + [True]]
    assert float(x[0, 2:].abs().sum()) == 0.0
    with pytest.raises(TooManyAtoms):
        pad_rows([np.ones((6, 3))], 5, 3)


def test_extra_padding_leaves_live_outputs_unchanged(generator, latents):
    x, pad = generator.training_tensors([lm.Z for lm in latents[:4]])
    s = torch.tensor([3, 3, 3, 3])
    narrow = generator.denoiser(x[:, :6], s, None, None, pad[:, :6])
    wide = generator.denoiser(x, s, None, None, pad)
    live = ~pad[:, :6]
    assert torch.allclose(narrow[live], wide[:, :6][live], atol=1e-5)


def test_checkpoint_round_trip(generator, tiny_vqvae, tmp_path):
    generator.save(tmp_path / "g.pt", seed=0)
    loaded = CompositionGenerator.load(tmp_path / "g.pt")
    a = sample_compositions(generator, 3, tiny_vqvae.codes, seed=6)
    b = sample_compositions(loaded, 3, tiny_vqvae.codes, seed=6)
    assert all(np.array_equal(x.z, y.z) for x, y in zip(a, b))


def test_filter_on_empty_pool(tiny_vqvae, small_dataset):
    qualified, report, decoded = filter_vsun([], tiny_vqvae, small_dataset, ToyStabilityOracle())
    assert qualified == [] and report.total == 0 and decoded == []
    assert report.qualified_fraction == 0.0


def test_filter_keeps_one_of_two_identical(tiny_vqvae, small_dataset):
    comp = composition_from_codes([0, 1, 2], tiny_vqvae.codes, np.zeros((3, 4), dtype=np.float32))
    qualified, report, decoded = filter_vsun([comp, comp], tiny_vqvae, small_dataset, ToyStabilityOracle())
    assert len(qualified) <= 1
    assert report.verdicts[1]["unique"] is False
    assert report.total == 2 and len(decoded) == 2


def test_filter_counts_match_verdicts(generator, tiny_vqvae, small_dataset):
    comps = sample_compositions(generator, 8, tiny_vqvae.codes, seed=7)
    qualified, report, _ = filter_vsun(comps, tiny_vqvae, small_dataset, ToyStabilityOracle(small_dataset))
    live = [v for v in report.verdicts if v is not None]
    for key in ("valid", "stable", "unique", "novel", "qualified"):
        assert getattr(report, key) == sum(v[key] for v in live)
    assert len(qualified) == report.qualified
    assert report.decode_failed == report.total - len(live)


def test_refine_without_qualified_is_skipped(generator):
    with pytest.raises(RefinementSkipped):
        refine_generator(generator, [], seed=0)


def test_refine_needs_raw_latents(generator, tiny_vqvae):
    with pytest.raises(ConfigError):
        refine_generator(generator, [composition_from_codes([0], tiny_vqvae.codes)], seed=0)


def test_refine_leaves_original_untouched(generator, tiny_vqvae, tmp_path):
    before = {k: v.clone() for k, v in generator.net.state_dict().items()}
    comps = sample_compositions(generator, 4, tiny_vqvae.codes, seed=8)
    refined = refine_generator(generator, comps, seed=0)
    assert all(torch.equal(before[k], v) for k, v in generator.net.state_dict().items())
    assert refined.history[-1]["stage"] == "refine"
    refined.save(tmp_path / "r.pt")
    again = CompositionGenerator.load(tmp_path / "r.pt")
    a = sample_compositions(refined, 2, tiny_vqvae.codes, seed=9)
    b = sample_compositions(again, 2, tiny_vqvae.codes, seed=9)
    assert all(np.array_equal(x.z, y.z) for x, y in zip(a, b))


def test_pool_round_trip(generator, tiny_vqvae, small_dataset, tmp_path):
    comps = sample_compositions(generator, 5, tiny_vqvae.codes, seed=10)
    _, report, _ = filter_vsun(comps, tiny_vqvae, small_dataset, ToyStabilityOracle())
    write_pool(tmp_path / "pool.jsonl", comps, report)
    back, verdicts = read_pool(tmp_path / "pool.jsonl", tiny_vqvae.codes)
    assert len(back) == 5
    for a, b in zip(comps, back):
        assert np.array_equal(a.code_indices, b.code_indices)
        assert np.array_equal(a.z, b.z)
        assert np.array_equal(a.E, b.E)
    assert verdicts == [v if v is not None else {"decode_failed": True} for v in report.verdicts]


def test_composition_record_without_latent(tiny_vqvae):
    comp = Composition.from_record({"code_indices": [2, 2, 0]}, tiny_vqvae.codes)
    assert comp.n_atoms == 3 and comp.z is None
    assert "z" not in comp.to_record()
