import numpy as np

from descriptors.backbone import BackboneConfig
from descriptors.head import HeadConfig
from descriptors.pipeline import DescriptorModel

TINY_BACKBONE = dict(patch=4, channels=8, layers=3, heads=2, levels=(1, 2, 3), height=8, width=8)


def tiny_model(fusion='interaction', slices=3, dim=16, seed=0) -> DescriptorModel:
    in_channels = slices if fusion == 'concat' else 1
    return DescriptorModel.initialize(
        BackboneConfig(**TINY_BACKBONE, in_channels=in_channels),
        HeadConfig(dim=dim, fusion=fusion),
        seed=seed,
    )


def random_slices(slices=3, size=8, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(slices, size, size))


def numeric_gradient(fn, array, eps=1e-6) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        plus, minus = array.copy(), array.copy()
        plus[index] += eps
        minus[index] -= eps
        grad[index] = (fn(plus) - fn(minus)) / (2.0 * eps)
    return grad
