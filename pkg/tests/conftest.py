"""Shared fixtures.

The session-wide quantize guard asserts the telescoping identity
(sum of looked-up entries + final residual == input, within float
associativity) on every quantize call made anywhere in the suite,
including full-size training runs.
"""

import numpy as np
import pytest

from rvqcodec import codec
from rvqcodec.codec import CodecConfig, init_model

TELESCOPE_TOL = 1e-6

_real_quantize = codec.quantize


def _checked_quantize(stack, fr, hook=None):
    idx, energy = _real_quantize(stack, fr, hook)
    flat = idx.flat()
    pixels = fr.pixels()
    acc = np.zeros_like(pixels)
    residual = pixels.copy()
    for s, cb in enumerate(stack.stages):
        q = cb.entries[flat[:, s]]
        acc += q
        residual -= q
    err = np.abs(acc + residual - pixels).max()
    assert err <= TELESCOPE_TOL, f"telescoping identity broken: max abs err {err:.3e}"
    return idx, energy


@pytest.fixture(scope="session", autouse=True)
def telescoping_guard():
    import rvqcodec.training as training_mod

    codec.quantize = _checked_quantize
    training_mod.quantize = _checked_quantize
    yield
    codec.quantize = _real_quantize
    training_mod.quantize = _real_quantize


@pytest.fixture
def small_model():
    """32-channel model, C_r=4, 3 stages of K=8; cheap but full-pipeline."""
    cfg = CodecConfig(channels=32, reduction_ratio=8, stages=3, codebook_size=8,
                      groups=2)
    return init_model(cfg, seed=11)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(1234)))
