"""Step-size-conditioned shortcut model trained from scratch (comparison baseline).

Time runs from noise (t=1) to data (t=0) as in the Euler sampler, so a
``d``-step from ``t`` lands at ``t - d`` and a two-step target from ``t``
needs ``t - 2d >= 0``.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_points
from .autodiff import NonFiniteError, OptimState, Tape, adamw_step
from .flow import PathSample, euler_step, interpolate, seeded_noise
from .network import NULL_LABEL, NetConfig, TrainableVelocity, VelocityField, init_theta
from .rng import SeedStreams


def sample_d(n, rng, size=None):
    """Uniform draw from ``{1/n, 2/n, 4/n, ..., 1/2}``."""
    if n < 2 or n & (n - 1):
        raise ValueError(f"n must be a power of two >= 2, got {n}")
    support = np.array([2.0 ** i / n for i in range(int(np.log2(n)))])
    pick = rng.integers(len(support), size)
    return support[pick]


def sc_target(field, x_t, t, d, c=None, finest=None):
    """Mean of two consecutive ``d``-step velocities of the frozen ``field``.

    Steps of size ``finest`` or smaller are queried at ``d=0`` (the flow-matching
    head), since no loss ever trains the network at the finest step itself.
    """
    t = np.asarray(t, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0) or np.any(d > 0.5):
        raise ValueError("d must lie in (0, 1/2]")
    if np.any(t - 2 * d < -1e-12):
        raise ValueError("two d-steps from t would run past t=0")
    dq = d if finest is None else np.where(d <= finest * (1 + 1e-9), 0.0, d)
    v1 = field(x_t, t, c, None, dq)
    x_next = euler_step(x_t, v1, t, t - d)
    v2 = field(x_next, np.maximum(t - d, 0.0), c, None, dq)
    return 0.5 * v1 + 0.5 * v2


def sc_loss(model, ema_field, x_t, t, d, c=None, tape=None, finest=None):
    """Squared error of the ``2d`` prediction against the two-step target (no update)."""
    target = sc_target(ema_field, x_t, t, d, c, finest)
    tape = Tape(record=False) if tape is None else tape
    pred = model.forward(tape, x_t, t, c, 2 * np.asarray(d, dtype=np.float64))
    return tape.mse(pred, tape.leaf(target))


def sc_train_step(model, ema_theta, opt, X, labels, streams, n=128, batch_size=256,
                  sc_batch=64, drop_prob=0.1, mu=0.999, consistency=True):
    """Joint flow-matching (d=0) and self-consistency step; returns ``(fm, sc, ema_theta)``."""
    cfg = model.config
    idx = streams["shortcut/data"].integers(len(X), batch_size)
    x0 = X[idx]
    lab = labels[idx] if labels is not None else np.full(batch_size, NULL_LABEL)
    if drop_prob > 0 and cfg.class_count:
        lab = np.where(streams["shortcut/cfg-drop"].random(batch_size) < drop_prob, NULL_LABEL, lab)
    x1 = streams["shortcut/noise"].normal(x0.shape)
    t = streams["shortcut/time"].random(batch_size)
    fm = PathSample.build(x0, x1, t, lab)

    tape = Tape()
    model.begin(tape)
    loss = tape.mse(model.forward(tape, fm.xt, fm.t, fm.label, np.zeros(batch_size)),
                    tape.leaf(fm.v_target))
    fm_value = loss.item()
    sc_value = 0.0
    if consistency:
        m = sc_batch
        d = sample_d(n, streams["shortcut/d"], m)
        # t on the grid with room for two d-steps: t = 1 - j/n, j in [0, n - 2dn]
        room = np.round(n - 2 * d * n).astype(np.int64)
        j = np.minimum(np.floor(streams["shortcut/time"].random(m) * (room + 1)), room)
        ts = 1.0 - j / n
        xs = interpolate(x0[:m], x1[:m], ts)
        ema_field = VelocityField(cfg, ema_theta)
        target = sc_target(ema_field, xs, ts, d, fm.label[:m], 1.0 / n)
        sc = tape.mse(model.forward(tape, xs, ts, fm.label[:m], 2 * d), tape.leaf(target))
        sc_value = sc.item()
        loss = tape.add(loss, sc)
    grads = tape.backward(loss)
    model.end()
    if not np.isfinite(loss.item()):
        raise NonFiniteError("shortcut loss diverged")
    model.set_params(adamw_step(model.params, grads, opt))
    ema_theta = {k: mu * ema_theta[k] + (1.0 - mu) * model.theta[k] for k in ema_theta}
    return fm_value, sc_value, ema_theta


class ShortcutModel(BaseEstimator):
    """Flow model conditioned on step size, sampled with ``steps`` equal jumps."""

    def __init__(self, hidden_dim=128, num_hidden_layers=3, time_embed_dim=32, step_embed_dim=32,
                 n_iter=20000, learning_rate=1e-3, batch_size=256, sc_batch=64, grid_size=128,
                 label_dropout=0.1, ema_decay=0.999, consistency=True, random_state=0):
        self.hidden_dim = hidden_dim
        self.num_hidden_layers = num_hidden_layers
        self.time_embed_dim = time_embed_dim
        self.step_embed_dim = step_embed_dim
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.sc_batch = sc_batch
        self.grid_size = grid_size
        self.label_dropout = label_dropout
        self.ema_decay = ema_decay
        self.consistency = consistency
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_points(X)
        y = check_labels(y, len(X))
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        Z = (X - self.mean_) / self.scale_
        self.net_config_ = cfg = NetConfig(
            input_dim=X.shape[1], hidden_dim=self.hidden_dim,
            num_hidden_layers=self.num_hidden_layers, time_embed_dim=self.time_embed_dim,
            class_count=0 if y is None else int(y.max()) + 1, step_embed_dim=self.step_embed_dim)
        streams = SeedStreams(self.random_state)
        model = TrainableVelocity(cfg, init_theta(cfg, streams["shortcut/init"]))
        opt = OptimState(model.params, lr=self.learning_rate)
        ema = {k: v.copy() for k, v in model.theta.items()}
        self.loss_curve_ = np.empty((self.n_iter, 2))
        for it in range(self.n_iter):
            fm, sc, ema = sc_train_step(model, ema, opt, Z, y, streams, self.grid_size,
                                        self.batch_size, self.sc_batch, self.label_dropout,
                                        self.ema_decay, self.consistency)
            self.loss_curve_[it] = fm, sc
        self.theta_ = model.theta
        self.ema_theta_ = ema
        return self

    @property
    def field_(self):
        check_is_fitted(self, "theta_")
        return VelocityField(self.net_config_, self.theta_)

    def sample(self, seeds, steps=1, guidance=None):
        """``steps`` uniform jumps of size ``1/steps`` from seeded noise, in data coordinates."""
        cfg = self.net_config_
        z, labels = seeded_noise(seeds, cfg.input_dim, cfg.class_count)
        c = labels if cfg.class_count else None
        f = self.field_
        x = z
        d = 1.0 / steps
        dq = 0.0 if steps >= self.grid_size else d
        for i in range(steps):
            t = 1.0 - i * d
            x = euler_step(x, f(x, t, c, guidance, dq), t, max(t - d, 0.0))
        return x * self.scale_ + self.mean_
