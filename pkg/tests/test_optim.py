import numpy as np
import pytest

from engine.optim import Adam, clip_by_global_norm


def test_adam_minimizes_quadratic():
    params = {'x': np.array([3.0, -2.0])}
    opt = Adam(params, lr=0.1)
    for _ in range(500):
        opt.step({'x': 2.0 * params['x']})
    assert np.all(np.abs(params['x']) < 0.1)


def test_first_step_moves_by_lr():
    params = {'x': np.array([1.0])}
    Adam(params, lr=0.01).step({'x': np.array([5.0])})
    assert params['x'][0] == pytest.approx(0.99, abs=1e-6)


def test_missing_gradient_leaves_parameter():
    params = {'a': np.array([1.0]), 'b': np.array([1.0])}
    Adam(params, lr=0.1).step({'a': np.array([1.0])})
    assert params['b'][0] == 1.0
    assert params['a'][0] < 1.0


def test_state_round_trip():
    params = {'x': np.array([1.0, 2.0])}
    opt = Adam(params, lr=0.05)
    opt.step({'x': np.array([0.5, -0.5])})
    clone = Adam({'x': params['x'].copy()}, lr=1.0)
    clone.load_state_dict(opt.state_dict())
    assert clone.t == 1
    assert clone.lr == pytest.approx(0.05)
    np.testing.assert_array_equal(clone.m['x'], opt.m['x'])


def test_invalid_learning_rate():
    with pytest.raises(ValueError):
        Adam({'x': np.zeros(1)}, lr=0.0)


def test_clip_by_global_norm():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    clipped = clip_by_global_norm(grads, 1.0)
    total = np.sqrt(clipped['a'] ** 2 + clipped['b'] ** 2)
    assert float(total) == pytest.approx(1.0)
    assert clip_by_global_norm(grads, None)['a'][0] == 3.0
    assert clip_by_global_norm(grads, 10.0)['b'][0] == 4.0
