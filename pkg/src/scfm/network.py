"""Velocity MLP with sinusoidal time/step features, one-hot conditions and LoRA.

Parameters live in flat dicts keyed ``dense{i}.W`` / ``dense{i}.b``. The
class condition enters as a one-hot block of the input (the input layer's
columns for that block act as the learned embedding table, with the last
column reserved for the null label).
"""

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import NonFiniteError, _affine
from .rng import Xoshiro256pp

NULL_LABEL = -1


@dataclass
class NetConfig:
    input_dim: int = 2
    hidden_dim: int = 128
    num_hidden_layers: int = 3
    time_embed_dim: int = 32
    class_count: int = 0
    step_embed_dim: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_hidden_layers", "time_embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.class_count < 0 or self.step_embed_dim < 0:
            raise ValueError("class_count and step_embed_dim must be >= 0")
        for name in ("time_embed_dim", "step_embed_dim"):
            if getattr(self, name) % 2:
                raise ValueError(f"{name} must be even")

    @property
    def feature_dim(self):
        cond = self.class_count + 1 if self.class_count else 0
        return self.input_dim + self.time_embed_dim + cond + self.step_embed_dim

    @property
    def layer_shapes(self):
        dims = [self.feature_dim] + [self.hidden_dim] * self.num_hidden_layers + [self.input_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def layer_names(self):
        return [f"dense{i}" for i in range(len(self.layer_shapes))]

    def to_dict(self):
        return asdict(self)


def time_embed(t, dim):
    """Interleaved ``sin, cos`` of ``t`` at frequencies geometric in [1, 1000].

    Accepts a scalar (returns shape ``(dim,)``) or a 1-D array (``(len, dim)``).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    freqs = np.geomspace(1.0, 1000.0, dim // 2)
    t_arr = np.asarray(t, dtype=np.float64)
    ang = t_arr[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _per_row(value, b, what):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(b, float(arr))
    if arr.shape != (b,):
        raise ValueError(f"{what} must be a scalar or have shape ({b},), got {arr.shape}")
    return arr


def net_features(config, x, t, c=None, d=None):
    """Concatenated network input for a batch ``x`` of shape ``[b, input_dim]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"x must have shape [b, {config.input_dim}], got {x.shape}")
    b = x.shape[0]
    t = _per_row(t, b, "t")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    parts = [x, time_embed(t, config.time_embed_dim)]
    if config.class_count:
        labels = np.full(b, NULL_LABEL, dtype=np.int64) if c is None else np.asarray(c, dtype=np.int64)
        labels = np.broadcast_to(labels, (b,))
        if np.any(labels >= config.class_count) or np.any(labels < NULL_LABEL):
            raise ValueError(f"label out of range for {config.class_count} classes")
        onehot = np.zeros((b, config.class_count + 1))
        onehot[np.arange(b), np.where(labels == NULL_LABEL, config.class_count, labels)] = 1.0
        parts.append(onehot)
    elif c is not None and np.any(np.asarray(c) != NULL_LABEL):
        raise ValueError("labels given to an unconditional network")
    if config.step_embed_dim:
        if d is None:
            raise ValueError("step size d is required by a step-conditioned network")
        parts.append(time_embed(_per_row(d, b, "d"), config.step_embed_dim))
    elif d is not None:
        raise ValueError("step size d supplied to a network without a step head")
    return np.concatenate(parts, axis=1)


def init_theta(config, rng):
    if isinstance(rng, int):
        rng = Xoshiro256pp.substream(rng, "init")
    theta = {}
    for name, (out_dim, in_dim) in zip(config.layer_names, config.layer_shapes):
        theta[f"{name}.W"] = rng.normal((out_dim, in_dim)) / np.sqrt(in_dim)
        theta[f"{name}.b"] = np.zeros(out_dim)
    return theta


class LoraDelta:
    """Low-rank adapters ``(alpha / rank) * B @ A`` on every dense weight."""

    def __init__(self, factors, rank, alpha=None):
        self.factors = factors
        self.rank = int(rank)
        self.alpha = float(rank if alpha is None else alpha)

    @property
    def scale(self):
        return self.alpha / self.rank

    @classmethod
    def init(cls, config, rank=4, alpha=None, rng=0):
        if isinstance(rng, int):
            rng = Xoshiro256pp.substream(rng, "lora-init")
        factors = {}
        for name, (out_dim, in_dim) in zip(config.layer_names, config.layer_shapes):
            factors[f"{name}.A"] = rng.normal((rank, in_dim)) / np.sqrt(in_dim)
            factors[f"{name}.B"] = np.zeros((out_dim, rank))
        return cls(factors, rank, alpha)

    @property
    def layer_names(self):
        return sorted({k.rsplit(".", 1)[0] for k in self.factors}, key=lambda s: int(s[5:]))

    def effective(self):
        """Per-layer dense delta matrices keyed ``dense{i}.W``."""
        return {f"{n}.W": self.scale * (self.factors[f"{n}.B"] @ self.factors[f"{n}.A"])
                for n in self.layer_names}

    def copy(self):
        return LoraDelta({k: v.copy() for k, v in self.factors.items()}, self.rank, self.alpha)


def _dense_delta(delta):
    if delta is None:
        return {}
    if isinstance(delta, LoraDelta):
        return delta.effective()
    return delta


def merge_params(theta, delta):
    """``theta`` with every dense weight replaced by ``W + delta``; biases untouched."""
    merged = dict(theta)
    for key, d in _dense_delta(delta).items():
        if key not in theta:
            raise ValueError(f"delta for unknown layer {key}")
        if d.shape != theta[key].shape:
            raise ValueError(f"delta shape {d.shape} does not match {key} {theta[key].shape}")
        merged[key] = theta[key] + d
    return merged


def mlp(tape, h, config, params, lora=None, lora_scale=1.0):
    """Apply the MLP on ``tape`` to the feature tensor ``h``.

    ``params`` maps ``dense{i}.W``/``.b`` to tensors; ``lora`` optionally maps
    ``dense{i}.A``/``.B`` to tensors, added on the fly as ``scale * B(A h)``.
    """
    names = config.layer_names
    for i, name in enumerate(names):
        y = tape.affine(h, params[f"{name}.W"], params[f"{name}.b"])
        if lora is not None:
            low = tape.affine(tape.affine(h, lora[f"{name}.A"]), lora[f"{name}.B"])
            y = tape.add(y, tape.scale(low, lora_scale))
        h = tape.tanh(y) if i < len(names) - 1 else y
    return h


def _eval(config, weights, feats):
    # same arithmetic as ``mlp`` on a non-recording tape, minus the Tensor wrapping
    names = config.layer_names
    h = feats
    for i, name in enumerate(names):
        h = _affine(h, weights[f"{name}.W"], weights[f"{name}.b"])
        if i < len(names) - 1:
            h = np.tanh(h)
    return h


def forward_velocity(config, theta, x, t, c=None, d=None, delta=None):
    """Velocity of the network ``theta + delta`` at ``(x, t, c[, d])``; no gradients."""
    out = _eval(config, merge_params(theta, delta), net_features(config, x, t, c, d))
    if not np.isfinite(out).all():
        raise NonFiniteError("velocity network produced non-finite output")
    return out


def guided(v_cond, v_null, w):
    """Classifier-free guidance ``v_c + w (v_c - v_null)``; ``w`` scalar or per row."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("guidance scale must be >= 0")
    if w.ndim == 1:
        w = w[:, None]
    return v_cond + w * (v_cond - v_null)


def cfg_velocity(config, theta, x, t, c, w, d=None, delta=None):
    if not config.class_count:
        raise ValueError("classifier-free guidance needs a class-conditional network")
    weights = merge_params(theta, delta)
    v_c = _eval(config, weights, net_features(config, x, t, c, d))
    v_null = _eval(config, weights, net_features(config, x, t, None, d))
    out = guided(v_c, v_null, w)
    if not np.isfinite(out).all():
        raise NonFiniteError("guided velocity is not finite")
    return out


class VelocityField:
    """Frozen parameter set exposing ``(x, t, c, w) -> velocity``.

    Wraps merged weights so providers (teacher, EMA copies, students) can be
    passed around uniformly. ``w`` is ignored by unconditional networks and
    ``w=None`` means a plain conditional pass.
    """

    def __init__(self, config, theta, delta=None):
        self.config = config
        self.weights = merge_params(theta, delta)

    def __call__(self, x, t, c=None, w=None, d=None):
        if w is None or not self.config.class_count:
            out = _eval(self.config, self.weights, net_features(self.config, x, t, c, d))
        else:
            v_c = _eval(self.config, self.weights, net_features(self.config, x, t, c, d))
            v_null = _eval(self.config, self.weights, net_features(self.config, x, t, None, d))
            out = guided(v_c, v_null, w)
        if not np.isfinite(out).all():
            raise NonFiniteError("velocity network produced non-finite output")
        return out


class TrainableVelocity:
    """Velocity network whose base weights or LoRA factors are trained on a tape.

    With ``lora=None`` the base ``theta`` is trainable; otherwise ``theta`` is
    frozen and only the adapter factors receive gradients.
    """

    def __init__(self, config, theta, lora=None):
        self.config = config
        self.theta = theta
        self.lora = lora
        self._leaves = None

    @property
    def params(self):
        return self.theta if self.lora is None else self.lora.factors

    def set_params(self, new):
        if self.lora is None:
            self.theta = new
        else:
            self.lora.factors = new

    def begin(self, tape):
        """Register this step's parameter leaves on ``tape``."""
        train_base = self.lora is None
        base = {k: tape.leaf(v, requires_grad=train_base, name=k) for k, v in self.theta.items()}
        lora = None
        if not train_base:
            lora = {k: tape.leaf(v, requires_grad=True, name=k) for k, v in self.lora.factors.items()}
        self._leaves = (base, lora)

    def forward(self, tape, x, t, c=None, d=None):
        if self._leaves is None:
            self.begin(tape)
        base, lora = self._leaves
        feats = tape.leaf(net_features(self.config, x, t, c, d))
        scale = 1.0 if self.lora is None else self.lora.scale
        return mlp(tape, feats, self.config, base, lora, scale)

    def guided(self, tape, x, t, c, w, d=None):
        """Tape version of ``v_c + w (v_c - v_null)`` with per-row ``w``."""
        v_c = self.forward(tape, x, t, c, d)
        v_null = self.forward(tape, x, t, None, d)
        w = np.broadcast_to(np.asarray(w, dtype=np.float64), (v_c.shape[0],))[:, None]
        diff = tape.add(v_c, tape.scale(v_null, -1.0))
        return tape.add(v_c, tape.scale(diff, w))

    def end(self):
        self._leaves = None

    def field(self):
        return VelocityField(self.config, self.theta, self.lora)
