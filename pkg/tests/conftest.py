import numpy as np
import pytest

from cdpa.denoiser import WeightStore, default_descriptor, expected_tensors


def random_weight_store(mode: str = "noise-prediction", seed: int = 0, scale: float = 0.05) -> WeightStore:
    """Deterministic random weights for plumbing tests (no training involved)."""
    desc = default_descriptor(mode)
    rng = np.random.Generator(np.random.Philox(seed))
    tensors = {}
    for name, shape in expected_tensors(desc).items():
        if "norm" in name and name.endswith(".weight"):
            tensors[name] = np.ones(shape, np.float32)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape, np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return WeightStore(descriptor=desc, tensors=tensors)


def zero_weight_store(mode: str = "noise-prediction") -> WeightStore:
    desc = default_descriptor(mode)
    tensors = {name: np.zeros(shape, np.float32)
               for name, shape in expected_tensors(desc).items()}
    return WeightStore(descriptor=desc, tensors=tensors)


@pytest.fixture(scope="session")
def random_noise_store() -> WeightStore:
    return random_weight_store("noise-prediction", seed=17)


@pytest.fixture(scope="session")
def random_denoise_store() -> WeightStore:
    return random_weight_store("denoise", seed=23)
