"""Velocity-space shortcut distillation of a flow-matching teacher into a LoRA student.

Each batch element regresses the student velocity at ``(x_t1, t1)`` onto an
interval-weighted two-step target

    (d_i * v_a(x_t1, t1) + d_next * v_b(x_t2, t2)) / (d_i + d_next)

where ``x_t2`` is one Euler step of provider ``a`` from ``x_t1``. The first
``k`` elements use adjacent grid points and teacher-led providers; the rest
use a random power-of-two stride and the stop-gradient EMA student.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_points
from .autodiff import NonFiniteError, OptimState, Tape, adamw_step
from .flow import euler_step, interpolate, make_grid, shift_grid
from .network import LoraDelta, TrainableVelocity, VelocityField, merge_params
from .rng import SeedStreams, Xoshiro256pp

VARIANTS = ("vanilla", "vanilla-mix", "cyclic", "fast-slow")

# (teacher-branch providers, self-branch providers) as (first eval, second eval)
_PROVIDERS = {
    "vanilla": (("teacher", "teacher"), ("slow", "slow")),
    "vanilla-mix": (("teacher", "slow"), ("slow", "slow")),
    "cyclic": (("teacher", "teacher"), ("slow", "slow")),
    "fast-slow": (("teacher", "slow"), ("fast", "slow")),
}


@dataclass
class DistillConfig:
    batch_size: int = 16
    teacher_fraction: float = 0.4
    mu_slow: float = 0.999
    mu_fast: float = 0.99
    restart_period: int = 1000
    variant: str = "fast-slow"
    grid_size: int = 128
    shift_range: tuple = (2.5, 4.5)
    guidance_range: tuple = (0.0, 4.0)
    learning_rate: float = 3e-4
    lora_rank: int = 4
    lora_alpha: float = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 < self.k < self.batch_size:
            raise ValueError(f"teacher-guided count k={self.k} must lie strictly between 0 and "
                             f"batch size {self.batch_size}")
        if not 0 < self.mu_fast < self.mu_slow < 1:
            raise ValueError("need 0 < mu_fast < mu_slow < 1")
        if self.restart_period < 0:
            raise ValueError("restart_period must be >= 0")
        if self.grid_size < 8 or self.grid_size & (self.grid_size - 1):
            raise ValueError("grid_size must be a power of two >= 8")
        lo, hi = self.shift_range
        if not 1 <= lo <= hi:
            raise ValueError("shift range must satisfy 1 <= low <= high")
        lo, hi = self.guidance_range
        if not 0 <= lo <= hi:
            raise ValueError("guidance range must satisfy 0 <= low <= high")

    @property
    def k(self):
        return int(round(self.teacher_fraction * self.batch_size))

    @property
    def uses_restart(self):
        return self.variant == "cyclic" and self.restart_period > 0


@dataclass
class TripleTimes:
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray
    skip: np.ndarray

    @property
    def d_i(self):
        return self.t1 - self.t2

    @property
    def d_next(self):
        return self.t2 - self.t3

    def __iter__(self):
        return iter((self.t1, self.t2, self.t3))


def self_skip_set(n):
    """Strides ``{2, 4, ..., n/4}`` for the self-teaching branch."""
    skips = [s for s in (1 << i for i in range(1, 64)) if s <= n // 4]
    if not skips:
        raise ValueError(f"grid of {n} steps is too small for self-teaching skips")
    return skips


def sample_triples(grid, skip, rng, start=None):
    """Grid values at ``(i, i+skip, i+2 skip)`` for uniformly drawn start ``i``.

    ``skip`` may be a scalar or one stride per batch element.
    """
    skip = np.atleast_1d(np.asarray(skip, dtype=np.int64))
    if np.any(skip < 1):
        raise ValueError("skip must be >= 1")
    room = grid.n - 2 * skip
    if np.any(room < 0):
        raise ValueError(f"grid of {grid.n} steps has no room for skip {int(skip.max())}")
    if start is None:
        start = np.floor(rng.random(len(skip)) * (room + 1)).astype(np.int64)
        start = np.minimum(start, room)
    start = np.broadcast_to(np.asarray(start, dtype=np.int64), skip.shape)
    times = grid.times
    return TripleTimes(times[start], times[start + skip], times[start + 2 * skip], skip)


def sample_triple(grid, skip, rng, start=None):
    return sample_triples(grid, skip, rng, start)


def interval_weighted(v_a, v_b, d_i, d_next):
    """Convex mix of two velocities weighted by their interval lengths."""
    d_i = np.asarray(d_i, dtype=np.float64)
    d_next = np.asarray(d_next, dtype=np.float64)
    if np.any(d_i <= 0) or np.any(d_next <= 0):
        raise ValueError("interval lengths must be positive")
    w = d_i / (d_i + d_next)
    if w.ndim == 1:
        w = w[:, None]
    return w * v_a + (1.0 - w) * v_b


def scfm_target(provider_a, provider_b, x_t1, triple, c=None, w=None):
    """Interval-weighted two-step velocity target; providers are frozen fields."""
    t1, t2, t3 = (np.asarray(v, dtype=np.float64) for v in triple)
    v_a = provider_a(x_t1, t1, c, w)
    x_t2 = euler_step(x_t1, v_a, t1, t2)
    v_b = provider_b(x_t2, t2, c, w)
    target = interval_weighted(v_a, v_b, np.atleast_1d(t1 - t2), np.atleast_1d(t2 - t3))
    if not np.isfinite(target).all():
        raise NonFiniteError("distillation target is not finite")
    return target


def scfm_loss(predictions, targets, k, tape=None):
    """Mean-over-elements squared error across the whole mixed batch.

    ``k`` only records how many leading rows carry teacher-branch targets;
    every row is weighted equally.
    """
    n = targets.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k={k} must lie strictly between 0 and N={n}")
    if tape is None:
        tape = Tape(record=False)
        return tape.mse(tape.leaf(predictions), tape.leaf(targets)).item()
    return tape.mse(predictions, tape.leaf(targets))


def ema_update(slow, delta, mu):
    """``mu * slow + (1 - mu) * delta`` on effective per-layer delta matrices."""
    if not 0 < mu < 1:
        raise ValueError("mu must lie in (0, 1)")
    if isinstance(delta, LoraDelta):
        delta = delta.effective()
    if set(slow) != set(delta):
        raise ValueError("EMA state and adapter cover different layers")
    out = {}
    for k, s in slow.items():
        if s.shape != delta[k].shape:
            raise ValueError(f"shape mismatch for {k}: {s.shape} vs {delta[k].shape}")
        out[k] = mu * s + (1.0 - mu) * delta[k]
    return out


@dataclass
class EmaState:
    slow: dict
    fast: dict = None
    iteration: int = 0

    @classmethod
    def init(cls, delta, with_fast=False):
        eff = delta.effective() if isinstance(delta, LoraDelta) else delta
        return cls({k: v.copy() for k, v in eff.items()},
                   {k: v.copy() for k, v in eff.items()} if with_fast else None)


def cyclic_restart(state, delta, period, iteration):
    """Reset the slow copy to ``delta`` when ``iteration`` is a positive multiple of ``period``."""
    if period < 0:
        raise ValueError("period must be >= 0")
    if period > 0 and iteration % period == 0:
        eff = delta.effective() if isinstance(delta, LoraDelta) else delta
        state.slow = {k: v.copy() for k, v in eff.items()}
    return state


@dataclass
class StepResult:
    loss: float
    targets: np.ndarray = field(repr=False)


def distill_step(student, teacher, state, opt, X, labels, cfg, streams, base_grid=None):
    """One SCFM iteration; updates ``student.lora``, ``opt`` and ``state`` in place.

    ``X``/``labels`` is the pool the batch is drawn from; when its size equals
    the batch size the batch is the whole pool in order (few-shot mode).
    """
    N, k = cfg.batch_size, cfg.k
    base_grid = make_grid(cfg.grid_size) if base_grid is None else base_grid
    if len(X) == N:
        idx = np.arange(N)
    else:
        idx = streams["distill/data"].integers(len(X), N)
    x0 = X[idx]
    c = None if labels is None else labels[idx]
    x1 = streams["distill/noise"].normal(x0.shape)
    s = streams["distill/shift"].uniform(*cfg.shift_range)
    grid = shift_grid(base_grid, s)

    trng = streams["distill/triples"]
    skips = np.ones(N, dtype=np.int64)
    pool = self_skip_set(cfg.grid_size)
    skips[k:] = np.asarray(pool)[trng.integers(len(pool), N - k)]
    triple = sample_triples(grid, skips, trng)
    w = streams["distill/cfg-w"].uniform(*cfg.guidance_range, size=N) if c is not None else None

    x_t1 = interpolate(x0, x1, triple.t1)
    theta0 = student.theta
    fields = {"teacher": teacher, "slow": VelocityField(student.config, theta0, state.slow)}
    if state.fast is not None:
        fields["fast"] = VelocityField(student.config, theta0, state.fast)
    (ta, tb), (sa, sb) = _PROVIDERS[cfg.variant]
    parts = []
    for rows, (a, b) in ((slice(0, k), (ta, tb)), (slice(k, N), (sa, sb))):
        sub = TripleTimes(triple.t1[rows], triple.t2[rows], triple.t3[rows], skips[rows])
        parts.append(scfm_target(fields[a], fields[b], x_t1[rows], sub,
                                 None if c is None else c[rows], None if w is None else w[rows]))
    targets = np.concatenate(parts)

    tape = Tape()
    student.begin(tape)
    if c is None:
        pred = student.forward(tape, x_t1, triple.t1)
    else:
        pred = student.guided(tape, x_t1, triple.t1, c, w)
    loss = scfm_loss(pred, targets, k, tape)
    grads = tape.backward(loss)
    student.end()
    if not np.isfinite(loss.item()):
        raise NonFiniteError("distillation loss is not finite")
    student.set_params(adamw_step(student.params, grads, opt))

    state.iteration += 1
    eff = student.lora.effective()
    mu_slow = cfg.mu_slow
    state.slow = ema_update(state.slow, eff, mu_slow)
    if state.fast is not None:
        state.fast = ema_update(state.fast, eff, cfg.mu_fast)
    if cfg.uses_restart:
        cyclic_restart(state, eff, cfg.restart_period, state.iteration)
    return StepResult(loss.item(), targets)


def few_shot_mode(X, labels, m=10, seed=0):
    """Fixed ``m``-point training pool used whole as every batch."""
    from .data import few_shot_subset

    return few_shot_subset(X, labels, m, seed)


@dataclass
class MetricsRecord:
    iteration: int
    loss: float
    residual: float
    fidelity: dict
    straightness: float
    seconds: float

    CSV_HEADER = "iteration,loss,residual,fid_sw_3,fid_sw_4,fid_sw_8,straightness_4,seconds"

    def csv_row(self):
        vals = [self.iteration, self.loss, self.residual, self.fidelity.get(3, float("nan")),
                self.fidelity.get(4, float("nan")), self.fidelity.get(8, float("nan")),
                self.straightness, self.seconds]
        return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals)


class Evaluator:
    """Seed-matched metrics of a student against a fixed teacher reference."""

    def __init__(self, teacher, X, labels, seeds, steps=(3, 4, 8), teacher_steps=128, shift=3.0,
                 guidance=2.0, n_proj=128, residual_trials=4, residual_batch=256, seed=0):
        from .metrics import sample_outputs

        self.teacher = teacher
        self.seeds = list(seeds)
        self.steps = tuple(steps)
        self.shift = shift
        cc = teacher.config.class_count
        self.guidance = guidance if cc else None
        self.n_proj = n_proj
        self.seed = seed
        self.residual_trials = residual_trials
        self.teacher_samples = sample_outputs(teacher, self.seeds, teacher_steps, shift,
                                              self.guidance, cc)
        g = Xoshiro256pp.substream(seed, "eval/residual-data")
        idx = g.integers(len(X), min(residual_batch, len(X)))
        self.res_x = X[idx]
        self.res_c = None if labels is None else labels[idx]
        self.res_grid = shift_grid(make_grid(teacher_steps), shift)

    def fidelity(self, field, steps):
        from .metrics import sample_outputs, sliced_wasserstein

        out = sample_outputs(field, self.seeds, steps, self.shift, self.guidance,
                             field.config.class_count)
        return sliced_wasserstein(self.teacher_samples, out, self.n_proj, self.seed)

    def residual(self, field):
        from .metrics import consistency_residual

        rng = Xoshiro256pp.substream(self.seed, "eval/residual")
        return consistency_residual(field, self.res_x, self.res_c, self.res_grid,
                                    self.residual_trials, rng, self.guidance)

    def straightness(self, field, steps=4):
        from .metrics import sample_outputs, straightness

        traj = sample_outputs(field, self.seeds, steps, self.shift, self.guidance,
                              field.config.class_count, return_trajectory=True)
        return straightness(traj)

    def record(self, field, iteration, loss, seconds):
        fid = {s: self.fidelity(field, s) for s in self.steps}
        return MetricsRecord(iteration, loss, self.residual(field), fid,
                             self.straightness(field, 4), seconds)


class SCFMDistiller(BaseEstimator):
    """Few-step student distilled from a fitted :class:`FlowMatchingTeacher`.

    The student shares the teacher's frozen weights and trains rank-``lora_rank``
    adapters on every dense layer. ``variant`` selects the target providers:
    ``vanilla`` (teacher / slow EMA), ``vanilla-mix`` (teacher then slow EMA in
    the teacher branch), ``cyclic`` (vanilla with periodic EMA resets) and
    ``fast-slow`` (fast then slow EMA in the self branch).
    """

    def __init__(self, teacher=None, variant="fast-slow", n_iter=5000, batch_size=16,
                 teacher_fraction=0.4, mu_slow=0.999, mu_fast=0.99, restart_period=1000,
                 grid_size=128, shift_range=(2.5, 4.5), guidance_range=(0.0, 4.0),
                 learning_rate=3e-4, lora_rank=4, lora_alpha=None, few_shot=None,
                 eval_every=0, evaluator=None, random_state=0):
        self.teacher = teacher
        self.variant = variant
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.teacher_fraction = teacher_fraction
        self.mu_slow = mu_slow
        self.mu_fast = mu_fast
        self.restart_period = restart_period
        self.grid_size = grid_size
        self.shift_range = shift_range
        self.guidance_range = guidance_range
        self.learning_rate = learning_rate
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.few_shot = few_shot
        self.eval_every = eval_every
        self.evaluator = evaluator
        self.random_state = random_state

    def _config(self, batch_size):
        return DistillConfig(
            batch_size=batch_size, teacher_fraction=self.teacher_fraction, mu_slow=self.mu_slow,
            mu_fast=self.mu_fast, restart_period=self.restart_period, variant=self.variant,
            grid_size=self.grid_size, shift_range=tuple(self.shift_range),
            guidance_range=tuple(self.guidance_range), learning_rate=self.learning_rate,
            lora_rank=self.lora_rank, lora_alpha=self.lora_alpha)

    def fit(self, X, y=None, callback=None):
        """Distill on raw data ``X`` (standardized with the teacher's constants)."""
        if self.teacher is None:
            raise ValueError("a fitted teacher is required")
        check_is_fitted(self.teacher, "theta_")
        X = check_points(X, self.teacher.net_config_.input_dim)
        y = check_labels(y, len(X))
        Z = (X - self.teacher.mean_) / self.teacher.scale_
        if not self.teacher.net_config_.class_count:
            y = None
        if self.few_shot:
            Z, y_sub = few_shot_mode(Z, np.zeros(len(Z), np.int64) if y is None else y,
                                     self.few_shot, self.random_state)
            y = None if y is None else y_sub
        batch = self.few_shot or self.batch_size
        self.config_ = cfg = self._config(batch)
        streams = SeedStreams(self.random_state)
        config = self.teacher.net_config_
        teacher_field = VelocityField(config, self.teacher.theta_)
        lora = LoraDelta.init(config, cfg.lora_rank, cfg.lora_alpha, streams["distill/lora-init"])
        self.student_ = TrainableVelocity(config, self.teacher.theta_, lora)
        self.ema_state_ = EmaState.init(lora, with_fast=cfg.variant == "fast-slow")
        self.optim_state_ = OptimState(lora.factors, lr=cfg.learning_rate)
        self.history_ = []
        self.losses_ = np.empty(self.n_iter)
        base_grid = make_grid(cfg.grid_size)
        start = time.perf_counter()
        pending = []
        for it in range(self.n_iter + 1):
            if self.evaluator is not None and self.eval_every and (
                    it % self.eval_every == 0 or it == self.n_iter):
                pending.append(self.evaluator.record(self.student_.field(), it, float("nan"),
                                                     time.perf_counter() - start))
            if it == self.n_iter:
                break
            res = distill_step(self.student_, teacher_field, self.ema_state_, self.optim_state_,
                               Z, y, cfg, streams, base_grid)
            self.losses_[it] = res.loss
            if callback is not None:
                callback(it + 1, res.loss, self)
        for rec in pending:
            # loss column: mean step loss over the window ending at this snapshot
            lo = max(0, rec.iteration - self.eval_every)
            hi = max(rec.iteration, 1)
            rec.loss = float(np.mean(self.losses_[lo:hi])) if self.n_iter else float("nan")
            self.history_.append(rec)
        return self

    @property
    def lora_(self):
        return self.student_.lora

    @property
    def field_(self):
        check_is_fitted(self, "student_")
        return self.student_.field()

    def merged_params(self):
        return merge_params(self.student_.theta, self.student_.lora)

    def sample(self, seeds, steps=4, shift=3.0, guidance=2.0):
        from .metrics import sample_outputs

        cc = self.teacher.net_config_.class_count
        out = sample_outputs(self.field_, seeds, steps, shift, guidance if cc else None, cc)
        return out * self.teacher.scale_ + self.teacher.mean_
