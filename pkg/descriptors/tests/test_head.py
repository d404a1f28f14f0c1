import numpy as np
from django.test import SimpleTestCase

from descriptors.backbone import BackboneConfig
from descriptors.head import (
    HeadConfig, HeadParams, aggregate_global, fuse_slices, gem_pool, max_fuse, no_interaction_weights,
    relative_features, slice_weights, weighted_fuse,
)
from forestlpr.exceptions import ConfigError, DegenerateInputError

from .helpers import TINY_BACKBONE


class HeadTestCase(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.backbone = BackboneConfig(**TINY_BACKBONE)
        self.head = HeadParams.initialize(HeadConfig(), self.backbone, self.rng)
        self.slices = self.rng.normal(size=(5, 6, 24))


class InteractionTests(HeadTestCase):

    def test_weights_sum_to_one_per_token(self):
        for _ in range(20):
            slices = self.rng.normal(scale=5.0, size=(5, 6, 24))
            weights = slice_weights(relative_features(slices), self.head['w_a']).data
            self.assertEqual(weights.shape, (5, 6))
            self.assertLess(np.abs(weights.sum(axis=0) - 1.0).max(), 1e-6)

    def test_identical_slices_get_uniform_weights(self):
        same = np.repeat(self.slices[:1], 4, axis=0)
        weights = slice_weights(relative_features(same), self.head['w_a']).data
        np.testing.assert_allclose(weights, 0.25, atol=1e-12)
        fused, _ = fuse_slices(same, self.head)
        np.testing.assert_allclose(fused.data, self.slices[0], atol=1e-12)

    def test_relative_features_are_centred(self):
        np.testing.assert_allclose(relative_features(self.slices).data.sum(axis=0), 0.0, atol=1e-12)

    def test_no_interaction_weights_match_after_softmax(self):
        centred = slice_weights(relative_features(self.slices), self.head['w_a']).data
        raw = no_interaction_weights(self.slices, self.head['w_a']).data
        np.testing.assert_allclose(raw, centred, atol=1e-12)

    def test_weighted_fuse_is_convex(self):
        weights = np.zeros((5, 6))
        weights[2] = 1.0
        np.testing.assert_array_equal(weighted_fuse(weights, self.slices).data, self.slices[2])

    def test_max_fuse(self):
        fused, weights = fuse_slices(self.slices, self.head, 'max')
        self.assertIsNone(weights)
        np.testing.assert_array_equal(fused.data, self.slices.max(axis=0))
        np.testing.assert_array_equal(max_fuse(self.slices).data, fused.data)

    def test_concat_is_not_a_slice_fusion(self):
        with self.assertRaises(ConfigError):
            fuse_slices(self.slices, self.head, 'concat')


class AggregationTests(HeadTestCase):

    def test_gem_interpolates_mean_and_max(self):
        tokens = self.rng.uniform(0.1, 1.0, size=(10, 4))
        np.testing.assert_allclose(gem_pool(tokens, 1.0).data, tokens.mean(axis=0))
        np.testing.assert_allclose(gem_pool(tokens, 200.0).data, tokens.max(axis=0), rtol=0.02)

    def test_gem_clamps_negative_values(self):
        np.testing.assert_allclose(gem_pool(-np.ones((3, 2)), 3.0).data, 1e-6)

    def test_descriptor_is_unit_norm_with_default_dim(self):
        descriptor = aggregate_global(self.slices[0], self.head).data
        self.assertEqual(descriptor.shape, (1024,))
        self.assertLess(abs(np.linalg.norm(descriptor) - 1.0), 1e-6)

    def test_patch_permutation_invariance(self):
        tokens = self.slices[0]
        shuffled = np.vstack([tokens[:2], tokens[2:][self.rng.permutation(4)]])
        diff = aggregate_global(tokens, self.head).data - aggregate_global(shuffled, self.head).data
        self.assertLess(np.abs(diff).max(), 1e-9)

    def test_needs_global_tokens_and_a_patch(self):
        with self.assertRaises(DegenerateInputError):
            aggregate_global(self.slices[0][:2], self.head)

    def test_head_config_validation(self):
        with self.assertRaises(ConfigError):
            HeadConfig(fusion='sum')
        with self.assertRaises(ConfigError):
            HeadConfig(p_gem=0.0)
