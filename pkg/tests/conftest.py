import numpy as np
import pytest
from hypothesis import settings

from crystalconcepts.codebook import CodebookConfig, train_three_stage
from crystalconcepts.crystal import Crystal
from crystalconcepts.synthetic import SyntheticTemplateSpec, make_synthetic_dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def rock_salt(a=5.64, na=11, cl=17):
    """Primitive rock-salt cell with lattice constant ``a``."""
    lattice = 0.5 * a * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    return Crystal.from_fractional(lattice, [[0, 0, 0], [0.5, 0.5, 0.5]], [na, cl], 225)


def simple_cubic(a=3.0, z=29):
    return Crystal(np.eye(3) * a, [[0.0, 0.0, 0.0]], [z], 221)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_crystal(rng, n_atoms=None, species=(11, 12, 17, 8), length=(2.0, 8.0)):
    """Right-handed random cell with lengths in ``length`` and moderate angles."""
    while True:
        lengths = rng.uniform(*length, size=3)
        angles = np.radians(rng.uniform(70, 110, size=3))
        ca, cb, cg = np.cos(angles)
        sg = np.sin(angles[2])
        a, b, c = lengths
        cz2 = 1 - cb ** 2 - ((ca - cb * cg) / sg) ** 2
        if cz2 <= 0.05:
            continue
        lattice = np.array([[a, 0, 0], [b * cg, b * sg, 0],
                            [c * cb, c * (ca - cb * cg) / sg, c * np.sqrt(cz2)]])
        break
    n = n_atoms or int(rng.integers(1, 6))
    frac = rng.uniform(size=(n, 3))
    return Crystal.from_fractional(lattice, frac, rng.choice(species, size=n))


@pytest.fixture(scope="session")
def small_dataset():
    return make_synthetic_dataset(SyntheticTemplateSpec(count=24), seed=3)


@pytest.fixture(scope="session")
def tiny_config():
    return CodebookConfig(codebook_size=8, latent_dim=4, layers=1, hidden=32, heads=2,
                          max_atoms=8, batch_size=8, vae_epochs=2, vqvae_epochs=2)


@pytest.fixture(scope="session")
def tiny_vqvae(small_dataset, tiny_config):
    model, _ = train_three_stage(small_dataset, tiny_config, seed=0)
    return model


TINY_RUN = {
    "data": {"synthetic": {"count": 30}},
    "codebook": {"codebook_size": 8, "latent_dim": 4, "layers": 1, "hidden": 32, "heads": 2, "max_atoms": 8,
                 "batch_size": 16, "vae_epochs": 2, "vqvae_epochs": 2},
    "composition": {"layers": 1, "hidden": 32, "heads": 2, "steps": 10, "max_atoms": 8, "batch_size": 16,
                    "epochs": 2, "refine_epochs": 1},
    "base": {"layers": 1, "hidden": 32, "heads": 2, "steps": 10, "max_atoms": 8, "batch_size": 16, "epochs": 2},
    "sampling": {"n_compositions": 12, "n_generate": 8},
    "interpret": {"classifier": {"layers": 1, "hidden": 32, "heads": 2, "epochs": 2, "batch_size": 16,
                                 "max_atoms": 8}},
}


def tiny_run_config(output_dir, seed=0, **extra):
    """A full pipeline configuration that runs end to end in seconds."""
    from crystalconcepts.config import _merge, config_from_dict

    return config_from_dict(_merge(TINY_RUN, {"output_dir": str(output_dir), "seed": seed, **extra}))


# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
