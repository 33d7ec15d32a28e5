import numpy as np
import pytest

from hlq.harness.data import synthetic_dataset
from hlq.models.quantized import RngState
from hlq.models.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rng_state():
    return RngState(7)


@pytest.fixture
def random_tensor(rng):
    def make(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape).astype(np.float32) * scale)
    return make


@pytest.fixture
def layer_operands(rng):
    """x (B, L, I), w (O, I), g_y (B, L, O) drawn from N(0, 1)."""
    def make(B, L, I, O):
        x = Tensor(rng.standard_normal((B, L, I)).astype(np.float32))
        w = Tensor(rng.standard_normal((O, I)).astype(np.float32))
        g_y = Tensor(rng.standard_normal((B, L, O)).astype(np.float32))
        return x, w, g_y
    return make


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthetic_dataset(num_samples=256, num_classes=4, image_size=8, seed=3)


@pytest.fixture
def max_rel_error():
    def measure(estimate, reference):
        estimate = np.asarray(estimate, dtype=np.float64)
        reference = np.asarray(reference, dtype=np.float64)
        scale = np.max(np.abs(reference))
        return float(np.max(np.abs(estimate - reference)) / scale) if scale else float(np.max(np.abs(estimate)))
    return measure
