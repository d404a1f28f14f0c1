"""
Patchifying transformer encoder (DeiT layout, trained from scratch).

A BEV image is cut into p x p patches, each patch is mapped to C channels by a
linear adapter, class and distillation tokens are prepended and learned
positional embeddings added. The pre-norm encoder returns every layer's
output; three of them are concatenated along the channel axis into the
(N+2) x 3C token set used by the aggregation head.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import truncnorm

from bev.raster import DensityImage
from forestlpr.exceptions import ConfigError, NumericError

from .autograd import Tensor, broadcast_to, concat, gelu, layer_norm, softmax

logger = logging.getLogger(__name__)

INIT_STD = 0.02

BACKBONE_PRESETS = {
    'deit-s': {
        'patch': 16, 'channels': 384, 'layers': 12, 'heads': 6,
        'levels': (2, 7, 12), 'height': 480, 'width': 480,
    },
    'toy': {
        'patch': 8, 'channels': 32, 'layers': 4, 'heads': 2,
        'levels': (2, 3, 4), 'height': 64, 'width': 64,
    },
}


@dataclass(frozen=True)
class BackboneConfig:
    patch: int = 16
    channels: int = 384
    layers: int = 12
    heads: int = 6
    levels: tuple = (2, 7, 12)
    height: int = 480
    width: int = 480
    in_channels: int = 1
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, 'levels', tuple(int(v) for v in self.levels))
        if min(self.patch, self.channels, self.layers, self.heads, self.in_channels, self.mlp_ratio) < 1:
            raise ConfigError("backbone sizes must be positive integers")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"input {self.height}x{self.width} is not divisible by patch size {self.patch}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if len(self.levels) != 3:
            raise ConfigError(f"levels must name exactly three layers, got {self.levels}")
        low, mid, high = self.levels
        if not 1 <= low < mid < high <= self.layers:
            raise ConfigError(f"levels must satisfy 1 <= low < mid < high <= {self.layers}, got {self.levels}")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps must be > 0")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> BackboneConfig:
        try:
            values = dict(BACKBONE_PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown backbone preset {name!r}") from None
        values.update(overrides)
        return cls(**values)

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def tokens(self) -> int:
        return self.num_patches + 2

    @property
    def token_dim(self) -> int:
        return 3 * self.channels

    @property
    def patch_grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    def to_dict(self) -> dict:
        values = asdict(self)
        values['levels'] = list(self.levels)
        return values


class ParameterSet:
    """Named trainable tensors kept in declaration order."""

    def __init__(self, arrays: dict):
        expected = self.declared_shapes()
        names = [name for name, _ in expected]
        if list(arrays) != names:
            missing = [n for n in names if n not in arrays]
            extra = [n for n in arrays if n not in names]
            raise ConfigError(f"{type(self).__name__} names do not match (missing {missing[:3]}, unexpected {extra[:3]})")
        self._tensors = {}
        for name, shape in expected:
            value = np.array(arrays[name], dtype=np.float64)
            if value.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {value.shape}")
            self._tensors[name] = Tensor(value, requires_grad=True, name=name)

    def declared_shapes(self) -> list[tuple[str, tuple]]:
        raise NotImplementedError

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def sgd_step(self, grads, lr: float):
        """In-place x -= lr * g; ``grads`` is aligned with ``tensors()``."""
        for tensor, grad in zip(self.tensors(), grads):
            tensor.data = tensor.data - lr * grad


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class BackboneParams(ParameterSet):

    def __init__(self, config: BackboneConfig, arrays: dict):
        self.config = config
        super().__init__(arrays)

    def declared_shapes(self):
        return backbone_shapes(self.config)

    @classmethod
    def initialize(cls, config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
        arrays = {}
        for name, shape in backbone_shapes(config):
            if name.endswith('.bias'):
                arrays[name] = np.zeros(shape)
            elif name.endswith(('ln1.weight', 'ln2.weight')):
                arrays[name] = np.ones(shape)
            else:
                arrays[name] = trunc_normal(rng, shape)
        logger.debug(f"Initialized backbone with {sum(np.prod(s) for _, s in backbone_shapes(config))} parameters")
        return cls(config, arrays)


def backbone_shapes(cfg: BackboneConfig) -> list[tuple[str, tuple]]:
    c, hidden = cfg.channels, cfg.mlp_ratio * cfg.channels
    shapes = [
        ('adapter.weight', (cfg.in_channels * cfg.patch * cfg.patch, c)),
        ('adapter.bias', (c,)),
        ('cls_token', (c,)),
        ('dist_token', (c,)),
        ('pos_embed', (cfg.tokens, c)),
    ]
    for i in range(cfg.layers):
        prefix = f'layers.{i}'
        shapes += [
            (f'{prefix}.ln1.weight', (c,)), (f'{prefix}.ln1.bias', (c,)),
            (f'{prefix}.attn.q.weight', (c, c)), (f'{prefix}.attn.q.bias', (c,)),
            (f'{prefix}.attn.k.weight', (c, c)), (f'{prefix}.attn.k.bias', (c,)),
            (f'{prefix}.attn.v.weight', (c, c)), (f'{prefix}.attn.v.bias', (c,)),
            (f'{prefix}.attn.out.weight', (c, c)), (f'{prefix}.attn.out.bias', (c,)),
            (f'{prefix}.ln2.weight', (c,)), (f'{prefix}.ln2.bias', (c,)),
            (f'{prefix}.mlp.fc1.weight', (c, hidden)), (f'{prefix}.mlp.fc1.bias', (hidden,)),
            (f'{prefix}.mlp.fc2.weight', (hidden, c)), (f'{prefix}.mlp.fc2.bias', (c,)),
        ]
    return shapes


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, c, H, W) -> (B, N, c*p*p); patches in row-major grid order, values channel-major."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    blocks = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(b, gh * gw, c * patch * patch)


def as_image_batch(images, cfg: BackboneConfig) -> tuple[np.ndarray, bool]:
    """
    Coerce input to (B, c, H, W).

    A DensityImage or (H, W) array is one single-channel image, (B, H, W) is a
    batch of single-channel images. Returns the batch and whether the input
    was a single image.
    """
    single = isinstance(images, DensityImage)
    array = np.asarray(images.values if single else images, dtype=np.float64)
    if array.ndim == 2:
        array, single = array[None, None], True
    elif array.ndim == 3:
        array = array[:, None]
    elif array.ndim != 4:
        raise ConfigError(f"expected an image or image batch, got an array of shape {array.shape}")
    _, channels, h, w = array.shape
    if (h, w) != (cfg.height, cfg.width):
        raise ConfigError(f"image is {h}x{w} but the backbone expects {cfg.height}x{cfg.width}")
    if channels != cfg.in_channels:
        raise ConfigError(f"image has {channels} channels but the backbone expects {cfg.in_channels}")
    return array, single


def patch_embed(images, params: BackboneParams) -> Tensor:
    """
    Tokens (B, N+2, C), or (N+2, C) for a single image.

    Row 0 is the class token, row 1 the distillation token, rows 2.. the
    patches in row-major order; positional embeddings are added to all rows.
    """
    cfg = params.config
    batch, single = as_image_batch(images, cfg)
    b = batch.shape[0]
    c = cfg.channels
    patches = Tensor(patchify(batch, cfg.patch))
    embedded = patches @ params['adapter.weight'] + params['adapter.bias']
    cls_token = broadcast_to(params['cls_token'].reshape(1, 1, c), (b, 1, c))
    dist_token = broadcast_to(params['dist_token'].reshape(1, 1, c), (b, 1, c))
    tokens = concat([cls_token, dist_token, embedded], axis=1) + params['pos_embed']
    return tokens.reshape(cfg.tokens, c) if single else tokens


def _attention(x: Tensor, params: BackboneParams, prefix: str, heads: int, sink) -> Tensor:
    b, t, c = x.shape
    d = c // heads

    def project(kind: str) -> Tensor:
        z = x @ params[f'{prefix}.attn.{kind}.weight'] + params[f'{prefix}.attn.{kind}.bias']
        return z.reshape(b, t, heads, d).transpose(0, 2, 1, 3)

    q, k, v = project('q'), project('k'), project('v')
    weights = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d)), axis=-1)
    if sink is not None:
        sink.append(weights.data)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
    return mixed @ params[f'{prefix}.attn.out.weight'] + params[f'{prefix}.attn.out.bias']


def _mlp(x: Tensor, params: BackboneParams, prefix: str) -> Tensor:
    hidden = gelu(x @ params[f'{prefix}.mlp.fc1.weight'] + params[f'{prefix}.mlp.fc1.bias'])
    return hidden @ params[f'{prefix}.mlp.fc2.weight'] + params[f'{prefix}.mlp.fc2.bias']


def encoder_forward(tokens: Tensor, params: BackboneParams, cfg: BackboneConfig | None = None,
                    attention_sink: list | None = None) -> list[Tensor]:
    """
    Run the pre-norm encoder; returns the output of every layer.

    Each layer computes x + MSA(LN(x)) followed by x + MLP(LN(x)). When
    ``attention_sink`` is a list, each layer's (B, heads, T, T) attention
    weights are appended to it.
    """
    cfg = cfg or params.config
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] != cfg.channels:
        raise ConfigError(f"tokens have {x.shape[-1]} channels, expected {cfg.channels}")
    outputs = []
    for i in range(cfg.layers):
        prefix = f'layers.{i}'
        normed = layer_norm(x, params[f'{prefix}.ln1.weight'], params[f'{prefix}.ln1.bias'], cfg.ln_eps)
        x = x + _attention(normed, params, prefix, cfg.heads, attention_sink)
        normed = layer_norm(x, params[f'{prefix}.ln2.weight'], params[f'{prefix}.ln2.bias'], cfg.ln_eps)
        x = x + _mlp(normed, params, prefix)
        if not np.all(np.isfinite(x.data)):
            raise NumericError("encoder produced non-finite activations", layer=i + 1)
        outputs.append(x.reshape(x.shape[1:]) if single else x)
    return outputs


def multi_level_concat(outputs: list[Tensor], levels) -> Tensor:
    """[P_low | P_mid | P_high] along the channel axis; levels are 1-based layer numbers."""
    for level in levels:
        if not 1 <= level <= len(outputs):
            raise ConfigError(f"level {level} outside 1..{len(outputs)}")
    return concat([outputs[level - 1] for level in levels], axis=-1)


def backbone_forward(images, params: BackboneParams) -> Tensor:
    """Token set(s) (B, N+2, 3C), or (N+2, 3C) for a single image."""
    outputs = encoder_forward(patch_embed(images, params), params)
    return multi_level_concat(outputs, params.config.levels)
