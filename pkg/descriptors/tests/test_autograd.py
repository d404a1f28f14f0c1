import threading

import numpy as np
from django.test import SimpleTestCase

from descriptors.autograd import (
    Tensor, broadcast_to, concat, gelu, gradients, hinge, l2_normalize, layer_norm, no_grad, softmax, stack,
)
from forestlpr.exceptions import NumericError, TapeError

from .helpers import numeric_gradient


class GradientCheckMixin:
    """Compares the tape gradient of ``fn(Tensor)`` with central differences."""

    def assertGradientMatches(self, fn, array, rtol=1e-6, atol=1e-8):
        x = Tensor(array, requires_grad=True)
        analytic, = gradients(fn(x), [x])
        numeric = numeric_gradient(lambda a: fn(Tensor(a)).item(), array)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


class ElementaryOpTests(GradientCheckMixin, SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_arithmetic_with_broadcasting(self):
        b = self.rng.normal(size=(1, 3))
        c = self.rng.uniform(1.0, 2.0, size=(3,))
        self.assertGradientMatches(lambda x: ((x * b + 2.0 - x / c) ** 2).sum(), self.rng.normal(size=(2, 3)))

    def test_division_by_tensor(self):
        self.assertGradientMatches(lambda x: (1.0 / x).sum(), self.rng.uniform(1.0, 2.0, size=(4,)))

    def test_batched_matmul(self):
        w = self.rng.normal(size=(4, 5))
        weights = self.rng.normal(size=(2, 3, 5))
        self.assertGradientMatches(lambda x: ((x @ w) * weights).sum(), self.rng.normal(size=(2, 3, 4)))

    def test_vector_matmul(self):
        m = self.rng.normal(size=(4, 3))
        weights = self.rng.normal(size=3)
        self.assertGradientMatches(lambda x: ((x @ m) * weights).sum(), self.rng.normal(size=4))

    def test_mean_over_axis_and_reshape(self):
        weights = self.rng.normal(size=(3, 2))
        self.assertGradientMatches(
            lambda x: (x.mean(axis=0).reshape(3, 2) * weights).sum(), self.rng.normal(size=(4, 6)))

    def test_transpose_and_swapaxes(self):
        weights = self.rng.normal(size=(4, 2, 3))
        self.assertGradientMatches(
            lambda x: (x.transpose(2, 0, 1).swapaxes(1, 2) * weights).sum(), self.rng.normal(size=(3, 2, 4)))

    def test_indexing(self):
        weights = self.rng.normal(size=(2, 3))
        self.assertGradientMatches(lambda x: (x[1:] * weights).sum() + x[0, 2] * 3.0, self.rng.normal(size=(3, 3)))

    def test_concat_stack_broadcast(self):
        weights = self.rng.normal(size=(2, 2, 3))

        def fn(x):
            joined = concat([x, x * 2.0], axis=0)
            stacked = stack([joined, broadcast_to(x[:1], (2, 3))], axis=0)
            return (stacked * weights).sum()

        self.assertGradientMatches(fn, self.rng.normal(size=(1, 3)))

    def test_max_gradient_goes_to_first_maximum(self):
        x = Tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]], requires_grad=True)
        grad, = gradients(x.max(axis=1).sum(), [x])
        np.testing.assert_array_equal(grad, [[0, 1, 0], [1, 0, 0]])

    def test_hinge_has_zero_subgradient_at_kink(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        grad, = gradients(hinge(x).sum(), [x])
        np.testing.assert_array_equal(grad, [0, 0, 1])


class CompositeOpTests(GradientCheckMixin, SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_softmax(self):
        weights = self.rng.normal(size=(4, 3))
        self.assertGradientMatches(lambda x: (softmax(x, axis=0) * weights).sum(), self.rng.normal(size=(4, 3)))

    def test_softmax_is_shift_invariant(self):
        x = self.rng.normal(size=(5, 2))
        np.testing.assert_allclose(softmax(Tensor(x), axis=0).data, softmax(Tensor(x + 100.0), axis=0).data)

    def test_layer_norm(self):
        gamma = Tensor(self.rng.normal(size=5))
        beta = Tensor(self.rng.normal(size=5))
        weights = self.rng.normal(size=(3, 5))
        self.assertGradientMatches(
            lambda x: (layer_norm(x, gamma, beta) * weights).sum(), self.rng.normal(size=(3, 5)), rtol=1e-5)

    def test_layer_norm_parameter_gradients(self):
        x = Tensor(self.rng.normal(size=(3, 5)))
        beta = Tensor(self.rng.normal(size=5))
        weights = self.rng.normal(size=(3, 5))
        self.assertGradientMatches(lambda g: (layer_norm(x, g, beta) * weights).sum(), self.rng.normal(size=5))

    def test_gelu_is_exact(self):
        np.testing.assert_allclose(gelu(Tensor([0.0, 1.0, -1.0])).data, [0.0, 0.8413447460685429, -0.15865525393145707])
        self.assertGradientMatches(lambda x: gelu(x).sum(), self.rng.normal(size=6))

    def test_l2_normalize(self):
        weights = self.rng.normal(size=4)
        self.assertGradientMatches(lambda x: (l2_normalize(x) * weights).sum(), self.rng.normal(size=4))

    def test_l2_normalize_zero_vector(self):
        with self.assertRaises(NumericError):
            l2_normalize(Tensor(np.zeros(3)))


class TapeTests(SimpleTestCase):

    def test_unused_input_is_an_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True, name='x')
        y = Tensor([3.0], requires_grad=True, name='y')
        with self.assertRaises(TapeError) as ctx:
            gradients((x * x).sum(), [x, y])
        self.assertIn('y', str(ctx.exception))

    def test_output_without_trainable_inputs(self):
        with self.assertRaises(TapeError):
            gradients(Tensor([1.0]).sum(), [Tensor([1.0])])

    def test_backward_accumulates(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        (x * x).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [5.0, -1.0])

    def test_shared_subexpression(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        grad, = gradients((y + y * x).sum(), [x])
        np.testing.assert_allclose(grad, [2 * 2.0 + 3 * 4.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)
        self.assertTrue((x * 2.0).requires_grad)

    def test_no_grad_is_per_thread(self):
        x = Tensor([1.0], requires_grad=True)
        seen = []
        with no_grad():
            worker = threading.Thread(target=lambda: seen.append((x * 2.0).requires_grad))
            worker.start()
            worker.join()
        self.assertEqual(seen, [True])
