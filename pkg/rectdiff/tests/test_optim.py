import numpy as np
import pytest

from ..autodiff import Tensor
from ..errors import ShapeError
from ..optim import AdamState, adam_step


def test_zero_gradients_leave_params_unchanged(rng):
    """Test zero grads with no weight decay leave parameters exactly as they were."""
    params = [Tensor(rng.standard_normal((3, 2)), requires_grad=True),
              Tensor(rng.standard_normal(4), requires_grad=True)]
    before = [p.data.copy() for p in params]
    state = AdamState.for_params(params)
    for _ in range(5):
        adam_step(state, params, [np.zeros((3, 2)), None])
    assert all(np.array_equal(p.data, b) for p, b in zip(params, before))
    assert state.step == 5


def test_first_step_moves_by_lr():
    """Test the bias-corrected first step moves each coordinate by about lr against the gradient sign."""
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    state = AdamState.for_params([p], lr=0.01)
    adam_step(state, [p], [np.array([2.0, -0.3, 1e-3])])
    assert np.allclose(p.data, [0.99, -0.99, 0.49], atol=1e-6)


def test_decoupled_weight_decay():
    """Test weight decay shrinks parameters even with zero gradient."""
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = AdamState.for_params([p], lr=0.1, weight_decay=0.5)
    adam_step(state, [p], [np.zeros(1)])
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_step_decay_schedule():
    """Test lr · decay^(step // every) with a step decay of 0.9 every 10 steps."""
    state = AdamState.for_params([], lr=1e-3, lr_decay=0.9, lr_decay_every=10)
    assert state.current_lr(0) == 1e-3
    assert state.current_lr(9) == 1e-3
    assert state.current_lr(10) == pytest.approx(9e-4)
    assert state.current_lr(25) == pytest.approx(1e-3 * 0.81)


def test_used_lr_follows_schedule():
    """Test adam_step reports the decayed rate it applied."""
    p = Tensor(np.zeros(1), requires_grad=True)
    state = AdamState.for_params([p], lr=1.0, lr_decay=0.5, lr_decay_every=2)
    used = [adam_step(state, [p], [np.ones(1)]) for _ in range(5)]
    assert used == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_minimizes_quadratic():
    """Test Adam drives a simple quadratic toward its minimum."""
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    state = AdamState.for_params([p], lr=0.1, lr_decay=0.5, lr_decay_every=60)
    for _ in range(400):
        adam_step(state, [p], [2.0 * (p.data - 1.0)])
    assert np.allclose(p.data, 1.0, atol=2e-2)


def test_shape_mismatches():
    """Test wrong param counts and gradient shapes are rejected."""
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step(state, [p, p])
    with pytest.raises(ShapeError):
        adam_step(state, [p], [np.zeros(2)])
