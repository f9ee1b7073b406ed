"""Flow-matching paths, timestep grids, the FM loss, the Euler sampler and teacher training."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_labels, check_points
from .autodiff import NonFiniteError, OptimState, Tape, adamw_step
from .network import NULL_LABEL, NetConfig, TrainableVelocity, VelocityField, init_theta
from .rng import SeedStreams


@dataclass
class TimeGrid:
    """Strictly decreasing timesteps from 1 to 0; ``shift`` is the accumulated shift."""

    n: int
    times: np.ndarray
    shift: float = 1.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.shape != (self.n + 1,) or times[0] != 1.0 or times[-1] != 0.0:
            raise ValueError("grid must hold n+1 times from exactly 1 down to exactly 0")
        if np.any(np.diff(times) >= 0):
            raise ValueError("grid times must be strictly decreasing")
        self.times = times

    @property
    def intervals(self):
        return self.times[:-1] - self.times[1:]


def make_grid(n):
    if n < 1:
        raise ValueError("grid needs at least one step")
    return TimeGrid(n, np.linspace(1.0, 0.0, n + 1))


def shift_time(t, s):
    """The shift map ``s t / (1 + (s - 1) t)``."""
    t = np.asarray(t, dtype=np.float64)
    return s * t / (1.0 + (s - 1.0) * t)


def shift_grid(grid, s):
    if s < 1:
        raise ValueError(f"shift must be >= 1, got {s}")
    times = shift_time(grid.times, s)
    times[0], times[-1] = 1.0, 0.0
    return TimeGrid(grid.n, times, grid.shift * s)


def interpolate(x0, x1, t):
    """Point at time ``t`` on the straight path from data ``x0`` (t=0) to noise ``x1`` (t=1)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def euler_step(x, v, t_from, t_to):
    """Move ``x`` from ``t_from`` to ``t_to`` along velocity ``v`` (time runs noise -> data)."""
    dt = np.asarray(t_from, dtype=np.float64) - np.asarray(t_to, dtype=np.float64)
    if dt.ndim == 1:
        dt = dt[:, None]
    return x - dt * v


@dataclass
class PathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    v_target: np.ndarray
    label: np.ndarray

    @classmethod
    def build(cls, x0, x1, t, label=None):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x0),)).copy()
        if label is None:
            label = np.full(len(x0), NULL_LABEL, dtype=np.int64)
        return cls(x0, x1, t, interpolate(x0, x1, t), x1 - x0, np.asarray(label, dtype=np.int64))


def fm_loss(model, sample, drop_prob=0.0, rng=None, tape=None):
    """Flow-matching MSE between ``model`` velocity at ``(xt, t, c)`` and ``x1 - x0``.

    Labels are replaced by the null label with probability ``drop_prob``.
    Returns ``(loss, grads)``.
    """
    if len(sample.xt) == 0:
        raise ValueError("empty batch")
    labels = sample.label
    if drop_prob > 0:
        drop = rng.random(len(labels)) < drop_prob
        labels = np.where(drop, NULL_LABEL, labels)
    tape = Tape() if tape is None else tape
    pred = model.forward(tape, sample.xt, sample.t, labels)
    loss = tape.mse(pred, tape.leaf(sample.v_target))
    grads = tape.backward(loss)
    if hasattr(model, "end"):
        model.end()
    return loss.item(), grads


def euler_sample(field, grid, z, c=None, w=None):
    """Euler trajectory ``[x_{t_0}=z, ..., x_{t_n}]`` of shape ``(n+1, b, dim)``."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NonFiniteError("initial noise is not finite")
    traj = np.empty((grid.n + 1,) + z.shape)
    traj[0] = x = z
    times = grid.times
    for i in range(grid.n):
        v = field(x, times[i], c, w)
        with np.errstate(over="ignore", invalid="ignore"):
            x = euler_step(x, v, times[i], times[i + 1])
        if not np.isfinite(x).all():
            raise NonFiniteError(f"sampler state became non-finite at step {i}")
        traj[i + 1] = x
    return traj


def train_teacher(X, labels, config, iters, seed, lr=1e-3, batch_size=256, drop_prob=0.1,
                  callback=None):
    """Fit a flow-matching velocity network on ``X``; returns ``(theta, losses)``.

    Each iteration draws a data batch, fresh Gaussian noise and uniform ``t``.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    labels = None if labels is None else np.asarray(labels, dtype=np.int64)
    streams = SeedStreams(seed)
    model = TrainableVelocity(config, init_theta(config, streams["teacher/init"]))
    opt = OptimState(model.params, lr=lr)
    losses = np.empty(iters)
    for it in range(iters):
        idx = streams["teacher/data"].integers(len(X), batch_size)
        x1 = streams["teacher/noise"].normal((batch_size, config.input_dim))
        t = streams["teacher/time"].random(batch_size)
        lab = labels[idx] if labels is not None and config.class_count else None
        sample = PathSample.build(X[idx], x1, t, lab)
        p = drop_prob if config.class_count else 0.0
        loss, grads = fm_loss(model, sample, p, streams["teacher/cfg-drop"])
        if not np.isfinite(loss):
            raise NonFiniteError(f"teacher loss diverged at iteration {it}")
        model.set_params(adamw_step(model.params, grads, opt))
        losses[it] = loss
        if callback is not None:
            callback(it, loss)
    return model.theta, losses


def seeded_noise(seeds, dim, class_count):
    """Per-seed initial noise and label; the same seeds give the same inputs to any model."""
    from .rng import Xoshiro256pp

    z = np.empty((len(seeds), dim))
    labels = np.full(len(seeds), NULL_LABEL, dtype=np.int64)
    for i, s in enumerate(seeds):
        g = Xoshiro256pp.substream(s, "eval/noise")
        z[i] = g.normal(dim)
        if class_count:
            labels[i] = g.integers(class_count)
    return z, labels


class FlowMatchingTeacher(BaseEstimator):
    """Flow-matching velocity model fit on 2-D points (optionally labelled).

    Data are standardized per coordinate before training; ``sample`` maps
    back to data coordinates.

    Parameters
    ----------
    n_iter : int
        AdamW iterations.
    label_dropout : float
        Probability of replacing a label by the null label, so guided
        sampling has an unconditional branch to extrapolate from.
    """

    def __init__(self, hidden_dim=128, num_hidden_layers=3, time_embed_dim=32, n_iter=20000,
                 learning_rate=1e-3, batch_size=256, label_dropout=0.1, random_state=0):
        self.hidden_dim = hidden_dim
        self.num_hidden_layers = num_hidden_layers
        self.time_embed_dim = time_embed_dim
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.label_dropout = label_dropout
        self.random_state = random_state

    def fit(self, X, y=None, callback=None):
        X = check_points(X)
        y = check_labels(y, len(X))
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.net_config_ = NetConfig(
            input_dim=X.shape[1], hidden_dim=self.hidden_dim,
            num_hidden_layers=self.num_hidden_layers, time_embed_dim=self.time_embed_dim,
            class_count=0 if y is None else int(y.max()) + 1)
        self.theta_, self.loss_curve_ = train_teacher(
            (X - self.mean_) / self.scale_, y, self.net_config_, self.n_iter, self.random_state,
            lr=self.learning_rate, batch_size=self.batch_size, drop_prob=self.label_dropout,
            callback=callback)
        return self

    @property
    def field_(self):
        return VelocityField(self.net_config_, self.theta_)

    def trajectory(self, z, steps=128, shift=3.0, labels=None, guidance=None):
        """Euler trajectory from standardized noise ``z``, in data coordinates."""
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "theta_")
        grid = shift_grid(make_grid(steps), shift)
        traj = euler_sample(self.field_, grid, z, labels, guidance)
        return traj * self.scale_ + self.mean_

    def sample(self, seeds, steps=128, shift=3.0, guidance=None):
        z, labels = seeded_noise(seeds, self.net_config_.input_dim, self.net_config_.class_count)
        return self.trajectory(z, steps, shift, labels if self.net_config_.class_count else None,
                               guidance)[-1]
