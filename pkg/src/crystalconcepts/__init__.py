"""Concept-based compositional crystal generation.

Local atomic environments are quantized into a learned codebook of concepts;
a diffusion model samples new concept compositions, which condition a second
diffusion model over full crystal structures.
"""

from .config import RunConfig, load_config
from .crystal import Crystal, canonicalize, reparameterize_lattice
from .errors import (
    ConfigError,
    CrystalConceptsError,
    DecodeFailed,
    RefinementSkipped,
    StageFailed,
    TooManyAtoms,
)
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Crystal",
    "CrystalConceptsError",
    "DecodeFailed",
    "RefinementSkipped",
    "RunConfig",
    "StageFailed",
    "TooManyAtoms",
    "canonicalize",
    "load_config",
    "reparameterize_lattice",
    "run_pipeline",
]
