"""
From a BEV stack to a global descriptor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bev.raster import BevStack
from datasets.io import atomic_write_csv
from forestlpr.exceptions import ConfigError

from .autograd import Tensor, no_grad
from .backbone import BackboneConfig, BackboneParams, backbone_forward
from .head import HeadConfig, HeadParams, aggregate_global, fuse_slices

logger = logging.getLogger(__name__)


@dataclass
class DescriptorModel:
    """Backbone and head parameters that are trained and saved together."""

    backbone: BackboneParams
    head: HeadParams

    @classmethod
    def initialize(cls, backbone: BackboneConfig, head: HeadConfig, seed: int = 0) -> DescriptorModel:
        rng = np.random.default_rng(seed)
        if head.fusion == 'concat' and backbone.in_channels == 1:
            logger.warning("concat fusion with a single input channel sees only one slice")
        return cls(BackboneParams.initialize(backbone, rng), HeadParams.initialize(head, backbone, rng))

    @property
    def fusion(self) -> str:
        return self.head.config.fusion

    def parameters(self) -> list[Tensor]:
        return self.backbone.tensors() + self.head.tensors()

    def parameter_names(self) -> list[str]:
        return [f'backbone.{n}' for n in self.backbone.names()] + [f'head.{n}' for n in self.head.names()]

    def count(self) -> int:
        return self.backbone.count() + self.head.count()


def _slice_array(images) -> np.ndarray:
    array = images.as_array() if isinstance(images, BevStack) else np.asarray(images, dtype=np.float64)
    if array.ndim != 3:
        raise ConfigError(f"expected S x H x W slice images, got shape {array.shape}")
    return array


def describe_graph(images, model: DescriptorModel, fusion: str | None = None) -> Tensor:
    """Descriptor of one submap as a tape value, for training."""
    fusion = fusion or model.fusion
    array = _slice_array(images)
    if fusion == 'concat':
        if array.shape[0] != model.backbone.config.in_channels:
            raise ConfigError(
                f"concat fusion needs {model.backbone.config.in_channels} slices, got {array.shape[0]}"
            )
        tokens = backbone_forward(array[None], model.backbone)
        return aggregate_global(tokens.reshape(tokens.shape[1:]), model.head)
    slices = backbone_forward(array, model.backbone)
    fused, _ = fuse_slices(slices, model.head, fusion)
    return aggregate_global(fused, model.head)


def describe_single_slices(images, model: DescriptorModel) -> list[Tensor]:
    """One descriptor per slice, each aggregated from that slice's own tokens."""
    slices = backbone_forward(_slice_array(images), model.backbone)
    return [aggregate_global(slices[j], model.head) for j in range(slices.shape[0])]


def describe(stack, model: DescriptorModel) -> np.ndarray:
    """Unit-norm global descriptor of a BEV stack."""
    with no_grad():
        return describe_graph(stack, model).data.copy()


def slice_weight_table(stack, model: DescriptorModel) -> list[dict]:
    """Per-patch slice weights: one row per patch with its grid position."""
    if model.fusion not in ('interaction', 'no_interaction'):
        raise ConfigError(f"fusion {model.fusion!r} produces no slice weights")
    array = _slice_array(stack)
    with no_grad():
        slices = backbone_forward(array, model.backbone)
        _, weights = fuse_slices(slices, model.head)
    _, grid_w = model.backbone.config.patch_grid
    rows = []
    for patch, column in enumerate(weights.data[:, 2:].T):
        row = {'patch_row': patch // grid_w, 'patch_col': patch % grid_w}
        row.update({f'w_{j + 1}': repr(float(v)) for j, v in enumerate(column)})
        rows.append(row)
    return rows


def export_weights(stack, model: DescriptorModel, path) -> Path:
    """Write the per-patch slice weight table as CSV."""
    rows = slice_weight_table(stack, model)
    slices = _slice_array(stack).shape[0]
    fieldnames = ['patch_row', 'patch_col'] + [f'w_{j + 1}' for j in range(slices)]
    return atomic_write_csv(path, fieldnames, rows)
