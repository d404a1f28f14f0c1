import tempfile
from pathlib import Path

import numpy as np
import pytest
from django.test import SimpleTestCase
from scipy.stats import kstest

from bev.raster import BevConfig
from clouds.pointcloud import PointCloud
from datasets.io import read_csv
from descriptors.autograd import Tensor, gradients, no_grad
from descriptors.backbone import BackboneConfig
from descriptors.head import HeadConfig
from descriptors.pipeline import DescriptorModel
from forestlpr.exceptions import DatasetError, NumericError
from mining.overlap import LabeledPair, PairSet
from training.losses import cosine_distance, triplet_loss
from training.trainer import (
    TrainConfig, Trainer, Triplet, augment, sample_triplets, train, trainable_parameters, triplet_objective,
    write_loss_curve,
)

TINY = dict(patch=4, channels=8, heads=2, height=8, width=8)
STAGE_FUSIONS = (
    (1, 'interaction'), (2, 'interaction'), (2, 'no_interaction'), (2, 'max'), (1, 'concat'), (2, 'concat'),
)


def both_ways(query, other, label):
    return [LabeledPair(query, other, label, 0.0), LabeledPair(other, query, label, 0.0)]


def toy_pairs():
    return PairSet(both_ways('a', 'b', 'pos') + both_ways('a', 'c', 'neg') + both_ways('b', 'c', 'neg')
                   + both_ways('c', 'd', 'pos') + both_ways('a', 'd', 'neg') + both_ways('b', 'd', 'neg'))


def toy_clouds(seed=0):
    rng = np.random.default_rng(seed)
    return {sid: PointCloud(rng.uniform([-4, -4, 1], [4, 4, 4], size=(300, 3))) for sid in 'abcd'}


def gradient_errors(seed, stage=2, fusion='interaction', eps=1e-5):
    """
    Worst relative error between tape and central-difference gradients, per
    trainable tensor of the toy preset.

    Each tensor is checked at its largest-gradient entry and at one random
    entry whose gradient is at least 1% of that largest one.
    """
    in_channels = 5 if fusion == 'concat' else 1
    model = DescriptorModel.initialize(BackboneConfig.from_preset('toy', in_channels=in_channels),
                                       HeadConfig(dim=256, fusion=fusion), seed=seed)
    rng = np.random.default_rng(seed)
    images = [rng.uniform(size=(5, 64, 64)) for _ in range(3)]

    def loss():
        return triplet_objective(images, model, stage, margin=3.0)

    tensors = trainable_parameters(model, stage)
    analytic = gradients(loss(), tensors)
    errors = {}
    for tensor, grad in zip(tensors, analytic):
        magnitude = np.abs(grad).ravel()
        strongest = int(np.argmax(magnitude))
        candidates = np.flatnonzero(magnitude >= 0.01 * magnitude[strongest])
        worst = 0.0
        for flat in sorted({strongest, int(rng.choice(candidates))}):
            index = np.unravel_index(flat, grad.shape)
            original = tensor.data
            values = []
            for step in (eps, -eps):
                shifted = original.copy()
                shifted[index] += step
                tensor.data = shifted
                with no_grad():
                    values.append(loss().item())
            tensor.data = original
            numeric = (values[0] - values[1]) / (2 * eps)
            worst = max(worst, abs(numeric - grad[index]) / max(abs(numeric), abs(grad[index]), 1e-6))
        errors[tensor.name] = worst
    return errors


class LossTests(SimpleTestCase):

    def test_cosine_distance_values(self):
        self.assertAlmostEqual(cosine_distance([1, 0], [2, 0]), 0.0)
        self.assertAlmostEqual(cosine_distance([1, 0], [0, 3]), 1.0)
        self.assertAlmostEqual(cosine_distance([1, 1], [-1, -1]), 2.0)

    def test_tensor_and_array_paths_agree(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=5), rng.normal(size=5)
        self.assertAlmostEqual(cosine_distance(Tensor(a), b).item(), cosine_distance(a, b), places=12)

    def test_zero_vector(self):
        with self.assertRaises(NumericError):
            cosine_distance([0, 0], [1, 0])
        with self.assertRaises(NumericError):
            cosine_distance(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_triplet_hinge(self):
        q = [1.0, 0.0]
        self.assertEqual(triplet_loss(q, q, [0.0, 1.0], 0.3), 0.0)
        self.assertAlmostEqual(triplet_loss(q, q, q, 0.3), 0.3)
        self.assertAlmostEqual(triplet_loss(q, [0.0, 1.0], q, 0.3), 1.3)

    def test_inactive_triplet_has_zero_gradient(self):
        q = Tensor([1.0, 0.0], requires_grad=True)
        loss = triplet_loss(q, Tensor([1.0, 0.1]), Tensor([-1.0, 0.0]), 0.3)
        grad, = gradients(loss, [q])
        np.testing.assert_array_equal(grad, [0.0, 0.0])


class GradientGateTests(SimpleTestCase):

    def assertGradientsMatch(self, errors, context):
        worst = max(errors, key=errors.get)
        self.assertLess(errors[worst], 1e-4, f'{context}: {worst}')

    def test_every_trainable_tensor_matches_finite_differences(self):
        errors = gradient_errors(seed=0)
        self.assertIn('w_a', errors)
        self.assertIn('layers.3.ln2.bias', errors)
        self.assertEqual(len(errors), 5 + 16 * 4 + 2)
        self.assertGradientsMatch(errors, 'seed 0')

    @pytest.mark.slow
    def test_every_stage_and_fusion(self):
        for stage, fusion in STAGE_FUSIONS:
            errors = gradient_errors(seed=0, stage=stage, fusion=fusion)
            self.assertEqual('w_a' in errors, stage == 2 and fusion in ('interaction', 'no_interaction'))
            self.assertGradientsMatch(errors, f'stage {stage} {fusion}')

    @pytest.mark.slow
    def test_toy_model_gradients_over_ten_seeds(self):
        for seed in range(10):
            self.assertGradientsMatch(gradient_errors(seed), f'seed {seed}')


class TripletSamplingTests(SimpleTestCase):

    def test_one_triplet_per_trainable_query(self):
        triplets = sample_triplets(toy_pairs(), np.random.default_rng(0))
        self.assertEqual([t.query for t in triplets], ['a', 'b', 'c', 'd'])
        for t in triplets:
            self.assertIn(t.positive, toy_pairs().positives_of(t.query))
            self.assertIn(t.negative, toy_pairs().negatives_of(t.query))

    def test_unavailable_submaps_are_skipped(self):
        triplets = sample_triplets(toy_pairs(), np.random.default_rng(0), available={'a', 'b', 'c'})
        self.assertEqual([(t.query, t.positive, t.negative) for t in triplets], [('a', 'b', 'c'), ('b', 'a', 'c')])

    def test_triplet_ids_must_differ(self):
        with self.assertRaises(DatasetError):
            Triplet('a', 'a', 'b')

    def test_augment_keeps_heights_and_ranges(self):
        cloud = PointCloud([[3.0, 4.0, 2.0], [-1.0, 0.0, 5.0]])
        rotated = augment(cloud, np.random.default_rng(1))
        np.testing.assert_allclose(rotated.z, cloud.z)
        np.testing.assert_allclose(np.hypot(rotated.x, rotated.y), [5.0, 1.0])

    def test_augment_angle_is_uniform(self):
        rng = np.random.default_rng(7)
        cloud = PointCloud([[1.0, 0.0, 2.0]])
        angles = []
        for _ in range(10_000):
            rotated = augment(cloud, rng)
            angles.append(np.arctan2(rotated.y[0], rotated.x[0]))
        self.assertGreater(kstest(angles, 'uniform', args=(-np.pi, 2 * np.pi)).pvalue, 1e-3)
        self.assertLess(min(angles), -3.1)
        self.assertGreater(max(angles), 3.1)


class TrainableParameterTests(SimpleTestCase):

    def test_stage_one_leaves_slice_scorer_alone(self):
        model = DescriptorModel.initialize(BackboneConfig(**TINY, layers=4, levels=(1, 2, 3)), HeadConfig(dim=8))
        stage1 = {t.name for t in trainable_parameters(model, 1)}
        stage2 = {t.name for t in trainable_parameters(model, 2)}
        self.assertNotIn('w_a', stage1)
        self.assertIn('w_a', stage2)
        self.assertIn('w_g', stage1)
        self.assertFalse(any(name.startswith('layers.3.') for name in stage2))
        self.assertIn('layers.2.mlp.fc2.bias', stage2)

    def test_max_fusion_never_trains_slice_scorer(self):
        model = DescriptorModel.initialize(BackboneConfig(**TINY, layers=3, levels=(1, 2, 3)),
                                           HeadConfig(dim=8, fusion='max'))
        self.assertNotIn('w_a', {t.name for t in trainable_parameters(model, 2)})


class TrainerTests(SimpleTestCase):

    def setUp(self):
        self.bev = BevConfig(slices=3, res=1.0, extent=4.0, height=8, width=8)
        self.backbone = BackboneConfig(**TINY, layers=3, levels=(1, 2, 3))
        self.head = HeadConfig(dim=8)
        self.cfg = TrainConfig(lr=0.05, stage1_epochs=1, stage2_epochs=1, batch_size=2, seed=1)

    def fresh_model(self):
        return DescriptorModel.initialize(self.backbone, self.head, seed=0)

    def test_two_stage_curve(self):
        result = train(self.fresh_model(), toy_clouds(), toy_pairs(), self.cfg, self.bev)
        self.assertEqual([(r['epoch'], r['stage']) for r in result.curve], [(1, 1), (2, 2)])
        self.assertTrue(all(np.isfinite(result.losses())))
        self.assertEqual(len(result.losses(stage=2)), 1)

    def test_stage_one_does_not_move_slice_scorer(self):
        model = self.fresh_model()
        before = model.head['w_a'].data.copy()
        Trainer(model, toy_clouds(), toy_pairs(), self.cfg, self.bev).run_epoch(1)
        np.testing.assert_array_equal(model.head['w_a'].data, before)

    def test_result_does_not_depend_on_jobs(self):
        serial = train(self.fresh_model(), toy_clouds(), toy_pairs(), self.cfg, self.bev, jobs=1)
        threaded = train(self.fresh_model(), toy_clouds(), toy_pairs(), self.cfg, self.bev, jobs=3)
        self.assertEqual(serial.losses(), threaded.losses())
        for a, b in zip(serial.model.parameters(), threaded.model.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_no_triplets(self):
        pairs = PairSet(both_ways('a', 'b', 'pos'))
        with self.assertRaises(DatasetError):
            train(self.fresh_model(), toy_clouds(), pairs, self.cfg, self.bev)

    def test_loss_curve_csv(self):
        result = train(self.fresh_model(), toy_clouds(), toy_pairs(), self.cfg, self.bev)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_loss_curve(result, Path(tmp) / 'loss.csv')
            rows = read_csv(path)
        self.assertEqual([r['stage'] for r in rows], ['1', '2'])
        self.assertEqual(float(rows[0]['mean_loss']), result.curve[0]['mean_loss'])

    def test_fixed_images_are_cached_before_the_pool_runs(self):
        cfg = TrainConfig(lr=0.05, stage1_epochs=1, stage2_epochs=1, batch_size=2, seed=1, augment=False)
        trainer = Trainer(self.fresh_model(), toy_clouds(), toy_pairs(), cfg, self.bev, jobs=3)
        self.assertEqual(trainer._views(Triplet('a', 'b', 'c')), (None, None, None))
        self.assertEqual(sorted(trainer._static), ['a', 'b', 'c'])
        serial = train(self.fresh_model(), toy_clouds(), toy_pairs(), cfg, self.bev, jobs=1)
        threaded = train(self.fresh_model(), toy_clouds(), toy_pairs(), cfg, self.bev, jobs=3)
        self.assertEqual(serial.losses(), threaded.losses())
