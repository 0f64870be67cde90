"""
Shared fixtures for the bitalloc test suite.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from src.bitalloc.model_io import generate_synthetic_model, mlp_spec, resnet_like_spec, save_model  # noqa: E402
from src.bitalloc.quant import DEFAULT_BITS  # noqa: E402
from src.bitalloc.search import ErrorTable  # noqa: E402


def random_error_table(rng: np.random.Generator, num_layers: int, bits=DEFAULT_BITS) -> ErrorTable:
    """Random QE table with realistic structure plus deliberate edge cells.

    Errors roughly grow 4x per bit removed; some layers get a zero int8
    error and some cells are copied from the baseline to create exact ties.
    """
    bits = tuple(bits)
    magnitudes = 10.0 ** rng.uniform(-8, -2, size=(num_layers, 1))
    growth = np.array([4.0 ** (8 - b) for b in bits])[None, :]
    noise = rng.lognormal(0.0, 0.75, size=(num_layers, len(bits)))
    qe = magnitudes * growth * noise

    baseline = bits.index(8)
    ties = rng.random((num_layers, len(bits))) < 0.1
    qe[ties] = np.repeat(qe[:, [baseline]], len(bits), axis=1)[ties]
    qe[rng.random(num_layers) < 0.05, baseline] = 0.0
    return ErrorTable(tuple(f"layer{i}" for i in range(num_layers)), bits, qe.astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_error_table():
    return random_error_table


@pytest.fixture
def resnet_model():
    """6 layers: stem, two (1x1, 3x3) blocks, classifier."""
    return generate_synthetic_model(resnet_like_spec(blocks=2, width=8, seed=7))


@pytest.fixture
def mlp_model():
    return generate_synthetic_model(mlp_spec(depth=3, width=32, in_features=16, classes=10, seed=3))


@pytest.fixture
def saved_model(tmp_path, resnet_model):
    """Manifest path of the resnet fixture written to disk."""
    return save_model(resnet_model, tmp_path / "model" / "manifest.json")
