from rest_framework import serializers

from bev.raster import BEV_MODES, SLICE_PRESETS, BevConfig
from descriptors.backbone import BACKBONE_PRESETS, BackboneConfig
from descriptors.head import FUSION_MODES, HeadConfig
from evaluation.protocols import EvalConfig
from forestlpr.exceptions import ConfigError
from mining.overlap import MINING_MODES, OVERLAP_VARIANTS, MiningConfig
from synth.scene import SCENE_PRESETS, SynthParams
from terrain.ground import PreprocessConfig
from training.trainer import TrainConfig

from .validation import StrictSerializer


class SectionSerializer(StrictSerializer):
    """
    One RunConfig section. Omitted keys take the preset's value, then the
    dataclass default; the dataclass enforces cross-field constraints.
    """

    config_class = None
    presets = None

    def build(self, attrs):
        values = dict(attrs)
        preset = values.pop('preset', None)
        if preset is not None:
            merged = dict(self.presets[preset])
            merged.update(values)
            values = merged
        return self.config_class(**values)

    def validate(self, attrs):
        try:
            self.build(attrs)
        except ConfigError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs

    def create(self, validated_data):
        return self.build(validated_data)


class PreprocessSerializer(SectionSerializer):
    config_class = PreprocessConfig

    ground_cell = serializers.FloatField(required=False, min_value=0.01)
    ground_tolerance = serializers.FloatField(required=False, min_value=0.0)
    radius = serializers.FloatField(required=False, min_value=0.01)
    radius_step = serializers.FloatField(required=False, min_value=0.01)
    radius_max = serializers.FloatField(required=False, min_value=0.01)
    z_lo = serializers.FloatField(required=False)
    z_hi = serializers.FloatField(required=False)


class BevSerializer(SectionSerializer):
    config_class = BevConfig
    presets = SLICE_PRESETS

    preset = serializers.ChoiceField(choices=sorted(SLICE_PRESETS), required=False)
    slices = serializers.IntegerField(required=False, min_value=1, max_value=64)
    slice_height = serializers.FloatField(required=False, min_value=0.01)
    z_lo = serializers.FloatField(required=False)
    res = serializers.FloatField(required=False, min_value=0.001)
    extent = serializers.FloatField(required=False, min_value=0.01)
    height = serializers.IntegerField(required=False, min_value=1)
    width = serializers.IntegerField(required=False, min_value=1)
    mode = serializers.ChoiceField(choices=BEV_MODES, required=False)


class BackboneSerializer(SectionSerializer):
    config_class = BackboneConfig
    presets = BACKBONE_PRESETS

    preset = serializers.ChoiceField(choices=sorted(BACKBONE_PRESETS), required=False)
    patch = serializers.IntegerField(required=False, min_value=1)
    channels = serializers.IntegerField(required=False, min_value=1)
    layers = serializers.IntegerField(required=False, min_value=1)
    heads = serializers.IntegerField(required=False, min_value=1)
    levels = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=3, max_length=3,
                                   required=False)
    height = serializers.IntegerField(required=False, min_value=1)
    width = serializers.IntegerField(required=False, min_value=1)
    in_channels = serializers.IntegerField(required=False, min_value=1)
    mlp_ratio = serializers.IntegerField(required=False, min_value=1)
    ln_eps = serializers.FloatField(required=False, min_value=0.0)


class HeadSerializer(SectionSerializer):
    config_class = HeadConfig

    dim = serializers.IntegerField(required=False, min_value=1)
    p_gem = serializers.FloatField(required=False, min_value=0.01)
    fusion = serializers.ChoiceField(choices=FUSION_MODES, required=False)


class TrainSerializer(SectionSerializer):
    config_class = TrainConfig

    margin = serializers.FloatField(required=False)
    lr = serializers.FloatField(required=False, min_value=0.0)
    stage1_epochs = serializers.IntegerField(required=False, min_value=0)
    stage2_epochs = serializers.IntegerField(required=False, min_value=0)
    batch_size = serializers.IntegerField(required=False, min_value=1)
    seed = serializers.IntegerField(required=False, min_value=0)
    augment = serializers.BooleanField(required=False)


class MiningSerializer(SectionSerializer):
    config_class = MiningConfig

    mode = serializers.ChoiceField(choices=MINING_MODES, required=False)
    voxel = serializers.FloatField(required=False)
    overlap_positive = serializers.FloatField(required=False, min_value=0.0, max_value=1.0)
    overlap_negative = serializers.FloatField(required=False, min_value=0.0, max_value=1.0)
    overlap_variant = serializers.ChoiceField(choices=OVERLAP_VARIANTS, required=False)
    distance_positive = serializers.FloatField(required=False)
    distance_negative = serializers.FloatField(required=False)
    gate = serializers.FloatField(required=False)
    exclusion_window = serializers.FloatField(required=False, min_value=0.0)


class EvalSerializer(SectionSerializer):
    config_class = EvalConfig

    success_radius = serializers.FloatField(required=False)
    exclusion_window = serializers.FloatField(required=False, min_value=0.0)
    top_k = serializers.IntegerField(required=False, min_value=1)
    recall_ns = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1, required=False)
    radii = serializers.ListField(child=serializers.FloatField(), min_length=1, required=False)


class SynthSerializer(SectionSerializer):
    config_class = SynthParams
    presets = SCENE_PRESETS

    preset = serializers.ChoiceField(choices=sorted(SCENE_PRESETS), required=False)
    extent = serializers.FloatField(required=False)
    tree_density = serializers.FloatField(required=False, min_value=0.0)
    trunk_radius_min = serializers.FloatField(required=False)
    trunk_radius_max = serializers.FloatField(required=False)
    tree_height_min = serializers.FloatField(required=False)
    tree_height_max = serializers.FloatField(required=False)
    canopy_base = serializers.FloatField(required=False)
    canopy_radius_min = serializers.FloatField(required=False)
    canopy_radius_max = serializers.FloatField(required=False)
    terrain_waves = serializers.IntegerField(required=False, min_value=0)
    terrain_amplitude = serializers.FloatField(required=False, min_value=0.0)
    ground_density = serializers.FloatField(required=False, min_value=0.0)
    understory_density = serializers.FloatField(required=False, min_value=0.0)
    trunk_density = serializers.FloatField(required=False, min_value=0.0)
    canopy_density = serializers.FloatField(required=False, min_value=0.0)
    loop_radius = serializers.FloatField(required=False)
    submap_spacing = serializers.FloatField(required=False)
    submap_radius = serializers.FloatField(required=False)
    range_scale = serializers.FloatField(required=False)
    timestep = serializers.FloatField(required=False)
    passes = serializers.IntegerField(required=False, min_value=1)
    reverse_pass = serializers.BooleanField(required=False)
    revisit_offset = serializers.FloatField(required=False, min_value=0.0, max_value=1.0)
    yaw_jitter = serializers.FloatField(required=False, min_value=0.0)
    noise_sigma = serializers.FloatField(required=False, min_value=0.0)
    seasonal = serializers.BooleanField(required=False)
    blind_sector_width = serializers.FloatField(required=False, min_value=0.0)
    blind_sector_start = serializers.FloatField(required=False)
    split_sequences = serializers.BooleanField(required=False)


SECTION_SERIALIZERS = {
    'preprocess': PreprocessSerializer,
    'bev': BevSerializer,
    'backbone': BackboneSerializer,
    'head': HeadSerializer,
    'train': TrainSerializer,
    'mining': MiningSerializer,
    'eval': EvalSerializer,
    'synth': SynthSerializer,
}


class RunConfigSerializer(StrictSerializer):
    """The whole JSON run config; ``create()`` returns a dict of section dataclasses."""

    preprocess = PreprocessSerializer(required=False)
    bev = BevSerializer(required=False)
    backbone = BackboneSerializer(required=False)
    head = HeadSerializer(required=False)
    train = TrainSerializer(required=False)
    mining = MiningSerializer(required=False)
    eval = EvalSerializer(required=False)
    synth = SynthSerializer(required=False)

    def sections(self, attrs) -> dict:
        return {name: self.fields[name].build(attrs.get(name, {})) for name in SECTION_SERIALIZERS}

    def validate(self, attrs):
        built = self.sections(attrs)
        bev, backbone, head = built['bev'], built['backbone'], built['head']
        if (backbone.height, backbone.width) != (bev.height, bev.width):
            raise serializers.ValidationError({
                'backbone': [f'input {backbone.height}x{backbone.width} must equal bev output {bev.height}x{bev.width}'],
            })
        if head.fusion == 'concat' and backbone.in_channels != bev.slices:
            raise serializers.ValidationError({
                'backbone': [f'in_channels must equal bev.slices ({bev.slices}) for concat fusion'],
            })
        if head.fusion != 'concat' and backbone.in_channels != 1:
            raise serializers.ValidationError({'backbone': ['in_channels must be 1 unless head.fusion is concat']})
        return attrs

    def create(self, validated_data):
        return self.sections(validated_data)
