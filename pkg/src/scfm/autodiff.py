"""A small reverse-mode tape over float64 arrays.

Only the primitives the velocity networks need are provided: ``affine``,
``tanh``, ``add``, ``scale`` and ``mse``. A :class:`Tape` created with
``record=False`` evaluates the same primitives without recording, which is
how stop-gradient providers (teacher, EMA copies) are evaluated.
"""

import itertools

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a tensor, loss or sampler state stops being finite."""


class Tensor:
    __slots__ = ("data", "id", "requires_grad", "name")
    _ids = itertools.count()

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = data
        self.id = next(Tensor._ids)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def _affine(x, W, b):
    y = x @ W.T
    if b is not None:
        y = y + b
    return y


def _mse(a, b):
    d = a - b
    return np.array(np.mean(d * d))


class Tape:
    """Ordered record of primitive applications.

    ``backward`` walks the record in exact reverse order and clears it.
    """

    def __init__(self, record=True):
        self.record = record
        self._ops = []
        self._leaves = {}

    def __len__(self):
        return len(self._ops)

    def leaf(self, data, requires_grad=False, name=None):
        t = Tensor(data, requires_grad=requires_grad, name=name)
        if self.record:
            self._leaves[t.id] = t
        return t

    def _out(self, op, inputs, value, extra=None):
        out = Tensor(value)
        if self.record:
            self._ops.append((op, inputs, out, extra))
        return out

    def affine(self, x, W, b=None):
        if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
            raise ValueError(f"affine shape mismatch: x{x.shape} W{W.shape}")
        if b is not None and b.shape != (W.shape[0],):
            raise ValueError(f"affine bias shape {b.shape} != ({W.shape[0]},)")
        return self._out("affine", (x, W, b), _affine(x.data, W.data, None if b is None else b.data))

    def tanh(self, x):
        return self._out("tanh", (x,), np.tanh(x.data))

    def add(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return self._out("add", (a, b), a.data + b.data)

    def scale(self, x, factor):
        """Multiply by a constant scalar or broadcastable constant array."""
        factor = np.asarray(factor, dtype=np.float64)
        value = x.data * factor
        if value.shape != x.shape:
            raise ValueError(f"scale factor {factor.shape} changes shape {x.shape}")
        return self._out("scale", (x,), value, factor)

    def mse(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
        out = self._out("mse", (a, b), _mse(a.data, b.data))
        if not np.isfinite(out.data):
            raise NonFiniteError("loss is not finite")
        return out

    def backward(self, loss):
        """Return ``{name or id: dloss/dleaf}`` for every grad-tracked leaf."""
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if not any(op[2] is loss for op in self._ops) and loss.id not in self._leaves:
            raise KeyError("loss node is not on this tape")
        grads = {loss.id: np.ones_like(loss.data)}
        for op, inputs, out, extra in reversed(self._ops):
            g = grads.pop(out.id, None)
            if g is None:
                continue
            if op == "affine":
                x, W, b = inputs
                _accum(grads, x, g @ W.data)
                _accum(grads, W, g.T @ x.data)
                if b is not None:
                    _accum(grads, b, g.sum(axis=0))
            elif op == "tanh":
                _accum(grads, inputs[0], g * (1.0 - out.data * out.data))
            elif op == "add":
                _accum(grads, inputs[0], g)
                _accum(grads, inputs[1], g)
            elif op == "scale":
                _accum(grads, inputs[0], g * extra)
            elif op == "mse":
                a, b = inputs
                d = (a.data - b.data) * (2.0 * float(g) / a.size)
                _accum(grads, a, d)
                _accum(grads, b, -d)
        result = {}
        for t in self._leaves.values():
            if t.requires_grad:
                key = t.name if t.name is not None else t.id
                result[key] = grads.get(t.id, np.zeros_like(t.data))
        self._ops.clear()
        self._leaves.clear()
        return result

    def replay(self):
        """Re-run every recorded op from current leaf values; return the outputs."""
        values = {}

        def val(t):
            return None if t is None else values.get(t.id, t.data)

        outputs = []
        for op, inputs, out, extra in self._ops:
            args = [val(t) for t in inputs]
            if op == "affine":
                v = _affine(*args)
            elif op == "tanh":
                v = np.tanh(args[0])
            elif op == "add":
                v = args[0] + args[1]
            elif op == "scale":
                v = args[0] * extra
            else:
                v = _mse(*args)
            values[out.id] = v
            outputs.append(v)
        return outputs


def _accum(grads, t, g):
    if t is None:
        return
    if t.id in grads:
        grads[t.id] = grads[t.id] + g
    else:
        grads[t.id] = g


def nonlinearity(tape, x):
    return tape.tanh(x)


class OptimState:
    """AdamW moments and step counter for a dict of named parameters."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), weight_decay=1e-4, eps=1e-8):
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adamw_step(params, grads, state):
    """One decoupled-weight-decay Adam update; returns a new parameter dict."""
    if set(params) != set(state.m):
        raise ValueError("parameter names do not match optimizer state")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        p = p * (1.0 - state.lr * state.weight_decay)
        new[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f(tape, leaves)`` builds a scalar on ``tape``; ``x`` is an array or a
    dict of named arrays and ``leaves`` mirrors it with grad-tracked tensors.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = isinstance(x, dict)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in (x.items() if named else [("x", x)])}

    def evaluate(tape, values, requires_grad):
        leaves = {k: tape.leaf(v, requires_grad=requires_grad, name=k) for k, v in values.items()}
        out = f(tape, leaves if named else leaves["x"])
        if not np.isfinite(out.data).all():
            raise NonFiniteError("non-finite value during finite-difference check")
        return out

    tape = Tape()
    analytic = tape.backward(evaluate(tape, arrays, True))
    worst = 0.0
    for k, base in arrays.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate(Tape(record=False), arrays, False).item()
            flat[i] = orig - eps
            lo = evaluate(Tape(record=False), arrays, False).item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - num) / (abs(a) + 1e-12))
    return worst
