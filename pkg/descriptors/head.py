"""
Multi-BEV interaction and global aggregation.

Given the token sets P' (S, T, 3C) of the S height slices of one submap, the
head centres each token over the slices, scores every slice per token with
W_a, fuses the slices with the resulting softmax weights, and builds the
global descriptor from the two global tokens and a GeM pool of the patch
tokens, projected by W_g and L2-normalized.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from forestlpr.exceptions import ConfigError, DegenerateInputError

from .autograd import Tensor, concat, l2_normalize, softmax
from .backbone import BackboneConfig, ParameterSet, trunc_normal

FUSION_MODES = ('interaction', 'max', 'no_interaction', 'concat')
GEM_EPS = 1e-6


@dataclass(frozen=True)
class HeadConfig:
    dim: int = 1024
    p_gem: float = 3.0
    fusion: str = 'interaction'

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"descriptor dim must be >= 1, got {self.dim}")
        if not self.p_gem > 0:
            raise ConfigError(f"p_gem must be > 0, got {self.p_gem}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class HeadParams(ParameterSet):
    """W_a (3C,) slice scorer and W_g (9C, D) projection; W_g has no bias."""

    def __init__(self, config: HeadConfig, channels: int, arrays: dict):
        self.config = config
        self.channels = channels
        super().__init__(arrays)

    def declared_shapes(self):
        return head_shapes(self.config, self.channels)

    @classmethod
    def initialize(cls, config: HeadConfig, backbone: BackboneConfig, rng: np.random.Generator) -> HeadParams:
        arrays = {name: trunc_normal(rng, shape) for name, shape in head_shapes(config, backbone.channels)}
        return cls(config, backbone.channels, arrays)


def head_shapes(cfg: HeadConfig, channels: int) -> list[tuple[str, tuple]]:
    return [('w_a', (3 * channels,)), ('w_g', (9 * channels, cfg.dim))]


def _tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def relative_features(slices) -> Tensor:
    """ΔP' = P' minus its mean over the slice axis (axis 0)."""
    slices = _tensor(slices)
    return slices - slices.mean(axis=0, keepdims=True)


def slice_weights(relative, w_a) -> Tensor:
    """Per-token softmax over slices of ΔP'·W_a; shape (S, T), columns sum to 1."""
    relative, w_a = _tensor(relative), _tensor(w_a)
    return softmax(relative @ w_a, axis=0)


def no_interaction_weights(slices, w_a) -> Tensor:
    """Slice weights scored on raw P' instead of ΔP'."""
    return slice_weights(slices, w_a)


def weighted_fuse(weights, slices) -> Tensor:
    """P^w_i = Σ_j w_ij P'_ij, a per-token convex combination of the slices."""
    weights, slices = _tensor(weights), _tensor(slices)
    s, t = weights.shape
    return (weights.reshape(s, t, 1) * slices).sum(axis=0)


def max_fuse(slices) -> Tensor:
    """Elementwise maximum over slices."""
    return _tensor(slices).max(axis=0)


def gem_pool(tokens, p_gem: float = 3.0, eps: float = GEM_EPS) -> Tensor:
    """Per-channel generalized mean of max(x, eps) over the token rows."""
    tokens = _tensor(tokens)
    if tokens.shape[0] < 1:
        raise DegenerateInputError("GeM needs at least one token")
    return (tokens.clamp_min(eps) ** p_gem).mean(axis=0) ** (1.0 / p_gem)


def aggregate_global(fused, params: HeadParams) -> Tensor:
    """G = L2Norm(L2Norm([row0 | row1 | GeM(rows 2..)]) · W_g)."""
    fused = _tensor(fused)
    if fused.shape[0] < 3:
        raise DegenerateInputError(f"aggregation needs at least 3 token rows, got {fused.shape[0]}")
    pooled = gem_pool(fused[2:], params.config.p_gem)
    stacked = concat([fused[0], fused[1], pooled], axis=0)
    return l2_normalize(l2_normalize(stacked) @ params['w_g'])


def fuse_slices(slices, params: HeadParams, fusion: str | None = None) -> tuple[Tensor, Tensor | None]:
    """Fused token set and the slice weights used (None for max fusion)."""
    fusion = fusion or params.config.fusion
    slices = _tensor(slices)
    if fusion == 'interaction':
        weights = slice_weights(relative_features(slices), params['w_a'])
    elif fusion == 'no_interaction':
        weights = no_interaction_weights(slices, params['w_a'])
    elif fusion == 'max':
        return max_fuse(slices), None
    else:
        raise ConfigError(f"fusion {fusion!r} does not fuse per-slice token sets")
    return weighted_fuse(weights, slices), weights
