"""Small helpers shared by the training loops."""

import math

import numpy as np
import torch

from .errors import TrainingDiverged


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def derive_seed(seed, *labels):
    """Deterministic sub-seed for a named stage."""
    ss = np.random.SeedSequence([int(seed)] + [sum(ord(ch) * (k + 1) for k, ch in enumerate(str(lab))) for lab in labels])
    return int(ss.generate_state(1)[0])


def minibatches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def check_finite(loss, stage, step):
    value = float(loss.detach()) if hasattr(loss, "detach") else float(loss)
    if not math.isfinite(value):
        raise TrainingDiverged(stage, step)
    return value
