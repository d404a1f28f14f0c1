"""
Model file: b"FLPR-M", u32 version, u32 config length, JSON config block,
then every tensor as little-endian float32 in declaration order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from datasets.io import atomic_write
from forestlpr.exceptions import ConfigError, ModelFormatError

from .backbone import BackboneConfig, BackboneParams, backbone_shapes
from .head import HeadConfig, HeadParams, head_shapes
from .pipeline import DescriptorModel

MAGIC = b'FLPR-M'
VERSION = 1
_U32 = struct.Struct('<I')


def model_bytes(model: DescriptorModel) -> bytes:
    config = {
        'backbone': model.backbone.config.to_dict(),
        'head': model.head.config.to_dict(),
        'tensors': [[name, list(shape)] for name, shape in _shapes(model)],
    }
    block = json.dumps(config, sort_keys=True).encode('utf-8')
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(block)), block]
    for tensor in model.parameters():
        parts.append(tensor.data.astype('<f4').tobytes())
    return b''.join(parts)


def _shapes(model: DescriptorModel) -> list[tuple[str, tuple]]:
    names = model.parameter_names()
    return [(name, tensor.shape) for name, tensor in zip(names, model.parameters())]


def _expected_shapes(backbone: BackboneConfig, head: HeadConfig) -> list[tuple[str, tuple]]:
    return ([(f'backbone.{n}', s) for n, s in backbone_shapes(backbone)]
            + [(f'head.{n}', s) for n, s in head_shapes(head, backbone.channels)])


def save_params(model: DescriptorModel, path) -> Path:
    return atomic_write(path, model_bytes(model))


def _read_u32(raw: bytes, offset: int, what: str) -> tuple[int, int]:
    if offset + 4 > len(raw):
        raise ModelFormatError(f"model file truncated while reading {what}")
    return _U32.unpack_from(raw, offset)[0], offset + 4


def parse_model(raw: bytes) -> DescriptorModel:
    if raw[:len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, offset = _read_u32(raw, len(MAGIC), 'version')
    if version != VERSION:
        raise ModelFormatError(f"unsupported model file version {version} (this build reads version {VERSION})")
    length, offset = _read_u32(raw, offset, 'config length')
    if offset + length > len(raw):
        raise ModelFormatError("model file truncated inside the config block")
    try:
        config = json.loads(raw[offset:offset + length].decode('utf-8'))
        backbone_cfg = BackboneConfig(**config['backbone'])
        head_cfg = HeadConfig(**config['head'])
        declared = [(name, tuple(shape)) for name, shape in config['tensors']]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise ModelFormatError(f"model config block is invalid: {exc}") from None
    offset += length

    expected = _expected_shapes(backbone_cfg, head_cfg)
    if declared != expected:
        raise ModelFormatError("tensor shapes in the model file do not match its config")

    arrays = []
    for name, shape in declared:
        size = int(np.prod(shape)) * 4
        if offset + size > len(raw):
            raise ModelFormatError(f"model file truncated inside tensor {name}")
        arrays.append(np.frombuffer(raw, dtype='<f4', count=size // 4, offset=offset).reshape(shape).astype(np.float64))
        offset += size
    if offset != len(raw):
        raise ModelFormatError(f"model file has {len(raw) - offset} unexpected trailing bytes")

    n_backbone = len(backbone_shapes(backbone_cfg))
    backbone_names = [name for name, _ in backbone_shapes(backbone_cfg)]
    head_names = [name for name, _ in head_shapes(head_cfg, backbone_cfg.channels)]
    backbone = BackboneParams(backbone_cfg, dict(zip(backbone_names, arrays[:n_backbone])))
    head = HeadParams(head_cfg, backbone_cfg.channels, dict(zip(head_names, arrays[n_backbone:])))
    return DescriptorModel(backbone, head)


def load_params(path) -> DescriptorModel:
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"model file {path} does not exist")
    return parse_model(path.read_bytes())
