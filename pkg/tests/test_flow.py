import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scfm.autodiff import NonFiniteError, finite_diff_check
from scfm.flow import (
    FlowMatchingTeacher, PathSample, TimeGrid, euler_sample, euler_step, fm_loss, interpolate,
    make_grid, seeded_noise, shift_grid, shift_time, train_teacher,
)
from scfm.network import NetConfig, TrainableVelocity, init_theta, mlp, net_features
from scfm.rng import Xoshiro256pp


class ConstantField:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=np.float64)

    def __call__(self, x, t, c=None, w=None, d=None):
        return np.broadcast_to(self.v, np.shape(x)).copy()


class FixedOutput:
    """Model stub whose prediction is a fixed array."""

    def __init__(self, out):
        self.out = out

    def forward(self, tape, x, t, c=None, d=None):
        return tape.leaf(self.out)


def test_make_grid_examples():
    np.testing.assert_array_equal(make_grid(4).times, [1, 0.75, 0.5, 0.25, 0])
    np.testing.assert_array_equal(make_grid(1).times, [1, 0])
    np.testing.assert_array_equal(make_grid(2).times, [1, 0.5, 0])
    with pytest.raises(ValueError):
        make_grid(0)


def test_timegrid_invariants():
    with pytest.raises(ValueError):
        TimeGrid(2, [1.0, 0.6, 0.7])
    with pytest.raises(ValueError):
        TimeGrid(2, [0.9, 0.5, 0.0])


def test_shift_examples():
    g = make_grid(8)
    np.testing.assert_array_equal(shift_grid(g, 1.0).times, g.times)
    assert shift_time(0.5, 3.0) == 0.75
    for s in (1.0, 2.5, 7.0):
        assert shift_time(0.0, s) == 0.0 and shift_time(1.0, s) == 1.0
    with pytest.raises(ValueError):
        shift_grid(g, 0.5)
    assert shift_grid(shift_grid(g, 2.0), 1.5).shift == 3.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.floats(1.0, 20.0))
def test_shift_preserves_monotonicity(n, s):
    g = shift_grid(make_grid(n), s)
    assert g.times[0] == 1.0 and g.times[-1] == 0.0
    assert np.all(np.diff(g.times) < 0)
    interior = make_grid(n).times[1:-1]
    assert np.all(shift_time(interior, s) >= interior - 1e-15)


def test_interpolate_examples():
    x0, x1 = np.array([[0.0, 0.0]]), np.array([[2.0, 4.0]])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_array_equal(interpolate(x0, x1, 0.25), [[0.5, 1.0]])
    with pytest.raises(ValueError):
        interpolate(x0, np.zeros((2, 2)), 0.5)


def test_path_sample_invariants():
    g = Xoshiro256pp(0)
    x0, x1 = g.normal((5, 2)), g.normal((5, 2))
    s = PathSample.build(x0, x1, 0.3)
    np.testing.assert_array_equal(s.xt, 0.7 * x0 + 0.3 * x1)
    np.testing.assert_array_equal(s.v_target, x1 - x0)


def test_fm_loss_examples():
    g = Xoshiro256pp(1)
    s = PathSample.build(g.normal((4, 2)), g.normal((4, 2)), g.random(4))
    assert fm_loss(FixedOutput(s.v_target), s)[0] == 0.0
    assert fm_loss(FixedOutput(s.v_target + [1.0, 0.0]), s)[0] == pytest.approx(0.5, abs=1e-15)
    dup = PathSample.build(np.vstack([s.x0, s.x0]), np.vstack([s.x1, s.x1]), np.tile(s.t, 2))
    off = np.vstack([s.v_target, s.v_target]) + [0.3, -0.2]
    assert fm_loss(FixedOutput(off), dup)[0] == pytest.approx(
        fm_loss(FixedOutput(s.v_target + [0.3, -0.2]), s)[0], abs=1e-15)
    with pytest.raises(ValueError):
        fm_loss(FixedOutput(np.zeros((0, 2))), PathSample.build(np.zeros((0, 2)), np.zeros((0, 2)), 0.5))


def test_fm_loss_gradient_matches_finite_differences():
    config = NetConfig(hidden_dim=5, num_hidden_layers=2, time_embed_dim=4)
    theta = init_theta(config, Xoshiro256pp(2))
    g = Xoshiro256pp(3)
    s = PathSample.build(g.normal((3, 2)), g.normal((3, 2)), g.random(3))
    feats = net_features(config, s.xt, s.t)

    def f(tape, p):
        return tape.mse(mlp(tape, tape.leaf(feats), config, p), tape.leaf(s.v_target))
    assert finite_diff_check(f, theta) <= 1e-4
    _, grads = fm_loss(TrainableVelocity(config, theta), s)
    assert set(grads) == set(theta)


def test_euler_examples():
    z = Xoshiro256pp(4).normal((6, 2))
    v = np.array([0.3, -1.1])
    np.testing.assert_allclose(euler_sample(ConstantField(v), make_grid(1), z)[-1], z - v,
                               rtol=0, atol=1e-12)
    np.testing.assert_array_equal(euler_sample(ConstantField([0.0, 0.0]), make_grid(7), z)[-1], z)
    traj = euler_sample(ConstantField(v), make_grid(5), z)
    assert traj.shape == (6, 6, 2)
    np.testing.assert_array_equal(traj[0], z)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.floats(1.0, 10.0), st.integers(0, 1000))
def test_constant_field_telescopes_on_any_grid(n, s, seed):
    g = Xoshiro256pp(seed)
    z = g.normal((3, 2))
    v = g.normal(2)
    out = euler_sample(ConstantField(v), shift_grid(make_grid(n), s), z)[-1]
    np.testing.assert_allclose(out, z - v, rtol=0, atol=1e-12)


def test_euler_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        euler_sample(ConstantField([0.0, 0.0]), make_grid(2), np.array([[np.nan, 0.0]]))
    with pytest.raises(NonFiniteError):
        euler_sample(ConstantField([1e308, 0.0]), make_grid(2), np.array([[-1e308, 0.0]]))


def test_euler_step_sign_convention():
    x = np.array([[1.0, 1.0]])
    np.testing.assert_array_equal(euler_step(x, np.array([[2.0, 0.0]]), 1.0, 0.75), [[0.5, 1.0]])


def _tiny_data(n=64):
    g = Xoshiro256pp(9)
    return g.normal((n, 2)) + 3.0, g.integers(2, n)


def test_train_teacher_changes_params_and_is_deterministic():
    X, y = _tiny_data()
    config = NetConfig(hidden_dim=8, num_hidden_layers=2, time_embed_dim=4, class_count=2)
    init = init_theta(config, Xoshiro256pp.substream(5, "teacher/init"))
    a, la = train_teacher(X, y, config, 1, seed=5, batch_size=16)
    assert any(not np.array_equal(a[k], init[k]) for k in a)
    b, lb = train_teacher(X, y, config, 3, seed=5, batch_size=16)
    c, lc = train_teacher(X, y, config, 3, seed=5, batch_size=16)
    for k in b:
        assert np.array_equal(b[k], c[k])
    assert np.array_equal(lb, lc)
    with pytest.raises(ValueError):
        train_teacher(np.zeros((0, 2)), None, config, 1, 0)


def test_teacher_estimator_api():
    X, y = _tiny_data()
    est = FlowMatchingTeacher(hidden_dim=8, num_hidden_layers=1, time_embed_dim=4, n_iter=5,
                              batch_size=8)
    assert est.get_params()["n_iter"] == 5
    est.fit(X, y)
    assert est.net_config_.class_count == 2
    np.testing.assert_allclose(est.mean_, X.mean(axis=0))
    out = est.sample(range(10), steps=3, guidance=1.0)
    assert out.shape == (10, 2) and np.isfinite(out).all()
    with pytest.raises(ValueError):
        FlowMatchingTeacher().fit(np.array([[np.nan, 0.0]]))


def test_seeded_noise_is_per_seed():
    z1, l1 = seeded_noise([3, 4, 5], 2, 8)
    z2, l2 = seeded_noise([5, 3], 2, 8)
    np.testing.assert_array_equal(z1[2], z2[0])
    np.testing.assert_array_equal(z1[0], z2[1])
    assert l1[2] == l2[0]
