import numpy as np
import pytest

from symtrack import tensor as T
from symtrack.config import ModelConfig
from symtrack.gradcheck import NondeterministicError, finite_diff_check, relative_error
from symtrack.gradsuite import OP_CASES, check_op, key_bias_gradcheck, key_bias_positions, model_gradcheck
from symtrack.tensor import Tensor


def test_quadratic_passes():
    x = Tensor(np.array([3.0]), requires_grad=True)
    r = finite_diff_check(lambda t: T.tsum(t * t), x, eps=1e-5)
    assert r.passed and r.max_abs_err < 1e-6


def test_gelu_passes_at_half():
    x = Tensor(np.array([0.5]), requires_grad=True)
    assert finite_diff_check(lambda t: T.tsum(T.gelu(t)), x, tol=1e-4).passed


def test_corrupted_gradient_fails():
    x = Tensor(np.array([3.0]), requires_grad=True)
    r = finite_diff_check(lambda t: T.tsum(t * t), x, analytic=np.array([6.0 * 1.1]))
    assert not r.passed
    assert r.max_rel_err == pytest.approx(0.1 / 1.1, rel=1e-6)


def test_nondeterministic_function_detected():
    calls = iter(range(100))
    x = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(NondeterministicError):
        finite_diff_check(lambda t: T.tsum(t * float(next(calls))), x)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_index_subset_and_fourth_order_stencil():
    x = Tensor(np.linspace(-1, 1, 7), requires_grad=True)
    f = lambda t: T.tsum(T.exp(t) * t)  # noqa: E731
    r = finite_diff_check(f, x, eps=1e-3, stencil=4, indices=[[1, 3, 6]])  # x = -1 has zero slope
    assert r.n_checked == 3 and r.max_rel_err < 1e-9


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_class_over_100_seeds(name):
    worst = max(check_op(name, seed).max_rel_err for seed in range(100))
    assert worst <= 1e-4, f"{name}: {worst:.3g}"


def test_full_training_loss_every_adapt_scalar():
    """All trainable scalars of the adaptation stage, both paths plus distillation."""
    r = model_gradcheck(ModelConfig.micro(), seed=0, stage="adapt")
    assert r.n_checked > 600
    assert r.max_rel_err <= 1e-3, r.as_dict()


def test_full_training_loss_every_scalar_all_groups():
    r = model_gradcheck(ModelConfig.micro(), seed=1, stage="full")
    assert r.max_rel_err <= 1e-3, r.as_dict()


def test_key_bias_gradient_is_zero():
    """Softmax ignores a constant shift of a logit row, so the key bias gets no gradient."""
    assert list(key_bias_positions("blocks.0.attn.qkv.b", 24)) == list(range(8, 16))
    assert key_bias_positions("blocks.0.attn.qkv.w", 192).size == 0
    for seed in range(3):
        tape, fd = key_bias_gradcheck(ModelConfig.micro(), seed)
        assert tape <= 1e-14 and fd <= 1e-9


def test_key_biases_are_excluded_from_the_relative_check():
    r = model_gradcheck(ModelConfig.micro(), seed=11, per_tensor=4)
    assert r.max_rel_err <= 1e-3, r.as_dict()
