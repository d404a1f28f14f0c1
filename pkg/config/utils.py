"""
Loading, overriding and echoing run configurations.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from django.conf import settings
from rest_framework.exceptions import ValidationError

from bev.raster import BevConfig
from descriptors.backbone import BackboneConfig
from descriptors.head import HeadConfig
from evaluation.protocols import EvalConfig
from forestlpr.exceptions import ConfigError
from mining.overlap import MiningConfig
from synth.scene import SynthParams
from terrain.ground import PreprocessConfig
from training.trainer import TrainConfig

from .serializers import SECTION_SERIALIZERS, RunConfigSerializer
from .validation import flatten_errors

logger = logging.getLogger(__name__)

TOY_DOCUMENT = {
    'bev': {'res': 0.9375, 'extent': 30.0, 'height': 64, 'width': 64},
    'backbone': {'preset': 'toy'},
    'head': {'dim': 256},
    'train': {'lr': 0.01},
    'mining': {'mode': 'distance', 'distance_positive': 3.0, 'distance_negative': 20.0, 'exclusion_window': 100.0},
    'eval': {'exclusion_window': 100.0},
    'synth': {'extent': 120.0, 'loop_radius': 25.0},
}


@dataclass(frozen=True)
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthParams = field(default_factory=SynthParams)

    def as_dict(self) -> dict:
        """Fully expanded document; loading it back yields an equal config."""
        return json.loads(json.dumps({name: asdict(getattr(self, name)) for name in self.__dataclass_fields__}))


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value``; the value is JSON when it parses, a string otherwise."""
    target, sep, raw = text.partition('=')
    section, dot, key = target.strip().partition('.')
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def apply_overrides(document: dict, overrides) -> dict:
    """
    Apply ``section.key=value`` overrides in order. A ``preset`` override
    drops the keys that preset defines, so later explicit keys still win.
    """
    merged = {name: dict(values) if isinstance(values, dict) else values for name, values in document.items()}
    for text in overrides or ():
        section, key, value = parse_override(text)
        target = merged.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"config section {section!r} is not an object")
        if key == 'preset':
            presets = getattr(SECTION_SERIALIZERS.get(section), 'presets', None) or {}
            for name in (presets.get(value, {}) if isinstance(value, str) else {}):
                target.pop(name, None)
        target[key] = value
    return merged


def build_run_config(document: dict) -> RunConfig:
    serializer = RunConfigSerializer(data=document)
    try:
        serializer.is_valid(raise_exception=True)
    except ValidationError as exc:
        raise ConfigError(flatten_errors(exc.detail)) from None
    return RunConfig(**serializer.save())


def read_document(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return document


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON run config (default: FORESTLPR['DEFAULT_CONFIG']), apply ``--set`` overrides, validate."""
    path = path or settings.FORESTLPR['DEFAULT_CONFIG']
    config = build_run_config(apply_overrides(read_document(path), overrides))
    logger.debug(f"Loaded run config from {path}")
    return config


def default_document(preset: str = 'default') -> dict:
    """Fully populated config document for ``init_config``."""
    if preset == 'default':
        return RunConfig().as_dict()
    if preset == 'toy':
        return build_run_config(TOY_DOCUMENT).as_dict()
    raise ConfigError(f"unknown config preset {preset!r}")
