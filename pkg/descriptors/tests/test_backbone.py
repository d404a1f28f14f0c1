import math

import numpy as np
from django.test import SimpleTestCase

from descriptors.backbone import (
    BackboneConfig, BackboneParams, as_image_batch, backbone_forward, backbone_shapes, encoder_forward,
    multi_level_concat, patch_embed, patchify,
)
from forestlpr.exceptions import ConfigError, NumericError

from .helpers import TINY_BACKBONE


class BackboneConfigTests(SimpleTestCase):

    def test_default_is_deit_small(self):
        cfg = BackboneConfig()
        self.assertEqual((cfg.patch, cfg.channels, cfg.layers, cfg.heads), (16, 384, 12, 6))
        self.assertEqual(cfg.num_patches, 900)
        self.assertEqual(cfg.token_dim, 1152)

    def test_toy_preset(self):
        cfg = BackboneConfig.from_preset('toy')
        self.assertEqual(cfg.patch_grid, (8, 8))
        self.assertEqual(cfg.tokens, 66)
        self.assertEqual(sum(int(np.prod(s)) for _, s in backbone_shapes(cfg)), 55072)

    def test_preset_override(self):
        self.assertEqual(BackboneConfig.from_preset('toy', layers=6, levels=(2, 4, 6)).layers, 6)
        with self.assertRaises(ConfigError):
            BackboneConfig.from_preset('vit-h')

    def test_invalid_shapes(self):
        with self.assertRaises(ConfigError):
            BackboneConfig(**dict(TINY_BACKBONE, height=10))
        with self.assertRaises(ConfigError):
            BackboneConfig(**dict(TINY_BACKBONE, channels=9))
        with self.assertRaises(ConfigError):
            BackboneConfig(**dict(TINY_BACKBONE, levels=(2, 2, 3)))
        with self.assertRaises(ConfigError):
            BackboneConfig(**dict(TINY_BACKBONE, levels=(1, 2, 4)))


class BackboneForwardTests(SimpleTestCase):

    def setUp(self):
        self.cfg = BackboneConfig(**TINY_BACKBONE)
        self.params = BackboneParams.initialize(self.cfg, np.random.default_rng(0))
        self.image = np.random.default_rng(1).uniform(size=(8, 8))

    def test_initialization(self):
        self.assertFalse(self.params['adapter.bias'].data.any())
        np.testing.assert_array_equal(self.params['layers.0.ln1.weight'].data, np.ones(8))
        self.assertLessEqual(np.abs(self.params['pos_embed'].data).max(), 0.04)
        self.assertEqual(self.params.names()[:5], ['adapter.weight', 'adapter.bias', 'cls_token', 'dist_token', 'pos_embed'])

    def test_patchify_is_row_major(self):
        image = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(patchify(image, 2)[0], [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])

    def test_patch_embed_layout(self):
        tokens = patch_embed(self.image, self.params).data
        self.assertEqual(tokens.shape, (6, 8))
        pos = self.params['pos_embed'].data
        np.testing.assert_allclose(tokens[0], self.params['cls_token'].data + pos[0])
        np.testing.assert_allclose(tokens[1], self.params['dist_token'].data + pos[1])
        first_patch = self.image[:4, :4].reshape(-1)
        np.testing.assert_allclose(tokens[2], first_patch @ self.params['adapter.weight'].data + pos[2])

    def test_batch_matches_single_images(self):
        batch = np.stack([self.image, 1.0 - self.image])
        together = backbone_forward(batch, self.params).data
        for k in range(2):
            np.testing.assert_allclose(together[k], backbone_forward(batch[k], self.params).data, atol=1e-12)

    def test_encoder_outputs_and_attention(self):
        sink = []
        outputs = encoder_forward(patch_embed(self.image, self.params), self.params, attention_sink=sink)
        self.assertEqual(len(outputs), 3)
        self.assertEqual(outputs[0].shape, (6, 8))
        self.assertEqual(sink[0].shape, (1, 2, 6, 6))
        np.testing.assert_allclose(sink[0].sum(axis=-1), 1.0)

    def test_multi_level_concat(self):
        outputs = encoder_forward(patch_embed(self.image, self.params), self.params)
        tokens = multi_level_concat(outputs, (1, 3, 2)).data
        np.testing.assert_array_equal(tokens[:, 8:16], outputs[2].data)
        self.assertEqual(backbone_forward(self.image, self.params).shape, (6, 24))
        with self.assertRaises(ConfigError):
            multi_level_concat(outputs, (1, 2, 4))

    def test_non_finite_activation_names_layer(self):
        image = self.image.copy()
        image[0, 0] = np.nan
        with self.assertRaises(NumericError) as ctx:
            backbone_forward(image, self.params)
        self.assertEqual(ctx.exception.layer, 1)

    def test_wrong_input_size(self):
        with self.assertRaises(ConfigError):
            as_image_batch(np.zeros((16, 16)), self.cfg)
        with self.assertRaises(ConfigError):
            as_image_batch(np.zeros((1, 2, 8, 8)), self.cfg)


def naive_layer_norm(vector, weight, bias, eps):
    mean = sum(vector) / len(vector)
    variance = sum((v - mean) ** 2 for v in vector) / len(vector)
    return np.array([(v - mean) / math.sqrt(variance + eps) * w + b for v, w, b in zip(vector, weight, bias)])


def naive_encoder(tokens, arrays, cfg):
    """Token-by-token, head-by-head encoder used as an independent reference."""
    x = [np.array(row, dtype=np.float64) for row in tokens]
    width = cfg.channels // cfg.heads
    outputs = []
    for layer in range(cfg.layers):
        p = {name[len(f'layers.{layer}.'):]: value for name, value in arrays.items()
             if name.startswith(f'layers.{layer}.')}
        normed = [naive_layer_norm(v, p['ln1.weight'], p['ln1.bias'], cfg.ln_eps) for v in x]
        q = [v @ p['attn.q.weight'] + p['attn.q.bias'] for v in normed]
        k = [v @ p['attn.k.weight'] + p['attn.k.bias'] for v in normed]
        values = [v @ p['attn.v.weight'] + p['attn.v.bias'] for v in normed]
        mixed = [np.zeros(cfg.channels) for _ in x]
        for head in range(cfg.heads):
            cols = slice(head * width, (head + 1) * width)
            for a in range(len(x)):
                scores = [float(q[a][cols] @ k[b][cols]) / math.sqrt(width) for b in range(len(x))]
                exps = [math.exp(s - max(scores)) for s in scores]
                for b in range(len(x)):
                    mixed[a][cols] += exps[b] / sum(exps) * values[b][cols]
        x = [v + m @ p['attn.out.weight'] + p['attn.out.bias'] for v, m in zip(x, mixed)]
        normed = [naive_layer_norm(v, p['ln2.weight'], p['ln2.bias'], cfg.ln_eps) for v in x]
        hidden = [v @ p['mlp.fc1.weight'] + p['mlp.fc1.bias'] for v in normed]
        hidden = [np.array([h * 0.5 * (1.0 + math.erf(h / math.sqrt(2.0))) for h in row]) for row in hidden]
        x = [v + h @ p['mlp.fc2.weight'] + p['mlp.fc2.bias'] for v, h in zip(x, hidden)]
        outputs.append(np.array(x))
    return outputs


class NaiveReferenceTests(SimpleTestCase):

    def test_encoder_matches_naive_forward_on_four_tokens(self):
        cfg = BackboneConfig(**TINY_BACKBONE)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            arrays = {name: rng.normal(0.0, 0.3, size=shape) for name, shape in backbone_shapes(cfg)}
            params = BackboneParams(cfg, arrays)
            tokens = rng.normal(size=(4, cfg.channels))
            outputs = encoder_forward(tokens, params)
            for layer, (ours, reference) in enumerate(zip(outputs, naive_encoder(tokens, arrays, cfg))):
                np.testing.assert_allclose(ours.data, reference, atol=1e-5, err_msg=f'seed {seed} layer {layer}')
