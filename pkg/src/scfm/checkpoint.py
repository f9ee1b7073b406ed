"""Binary checkpoints: named little-endian float64 arrays behind a small header.

Layout: ``b"SCFM"``, version (u32), array count (u32), then per array the
name length (u32), UTF-8 name, rank (u32), dims (u32 each) and the raw
payload. All integers are little-endian.
"""

import struct

import numpy as np

from .autodiff import OptimState
from .distill import EmaState
from .network import LoraDelta, NetConfig, VelocityField

MAGIC = b"SCFM"
VERSION = 1

KIND_TEACHER = 0.0
KIND_STUDENT = 1.0
_NET_FIELDS = ("input_dim", "hidden_dim", "num_hidden_layers", "time_embed_dim", "class_count",
               "step_embed_dim")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def save_checkpoint(path, arrays):
    """Write ``{name: array}`` in insertion order; returns the byte count."""
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    blob = b"".join(out)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def load_checkpoint(path):
    """Read every array back as float64, preserving order."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank else ())
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    return arrays


def check_shapes(arrays, config, prefix="theta/"):
    """Raise naming the first layer whose stored shape disagrees with ``config``."""
    for name, (out_dim, in_dim) in zip(config.layer_names, config.layer_shapes):
        for key, want in ((f"{name}.W", (out_dim, in_dim)), (f"{name}.b", (out_dim,))):
            got = arrays.get(prefix + key)
            if got is None:
                raise CheckpointError(f"layer {name}: missing {key}")
            if got.shape != want:
                raise CheckpointError(f"layer {name}: stored {key} has shape {got.shape}, "
                                      f"config expects {want}")
    extra = {k[len(prefix):].split(".")[0] for k in arrays if k.startswith(prefix)}
    extra -= set(config.layer_names)
    if extra:
        raise CheckpointError(f"layer {sorted(extra)[0]}: not present in config")


def _put(arrays, prefix, d):
    for k, v in d.items():
        arrays[prefix + k] = v


def _get(arrays, prefix):
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def teacher_arrays(teacher):
    """Arrays for a fitted :class:`FlowMatchingTeacher`."""
    cfg = teacher.net_config_
    arrays = {"meta/kind": np.array([KIND_TEACHER]),
              "meta/net": np.array([getattr(cfg, f) for f in _NET_FIELDS], dtype=np.float64),
              "norm/mean": teacher.mean_, "norm/scale": teacher.scale_}
    _put(arrays, "theta/", teacher.theta_)
    return arrays


def student_arrays(distiller):
    """Arrays for a fitted :class:`SCFMDistiller`: base weights, adapters, EMA and optimizer."""
    arrays = teacher_arrays(distiller.teacher)
    arrays["meta/kind"] = np.array([KIND_STUDENT])
    lora = distiller.lora_
    arrays["lora/meta"] = np.array([lora.rank, lora.alpha], dtype=np.float64)
    _put(arrays, "lora/", lora.factors)
    ema = distiller.ema_state_
    arrays["ema/iteration"] = np.array([ema.iteration], dtype=np.float64)
    _put(arrays, "ema/slow/", ema.slow)
    if ema.fast is not None:
        _put(arrays, "ema/fast/", ema.fast)
    opt = distiller.optim_state_
    arrays["optim/hyper"] = np.array([opt.lr, *opt.betas, opt.weight_decay, opt.eps, opt.step])
    _put(arrays, "optim/m/", opt.m)
    _put(arrays, "optim/v/", opt.v)
    return arrays


class LoadedModel:
    """Frozen model restored from a checkpoint (teacher or distilled student)."""

    def __init__(self, arrays, config=None):
        if "meta/kind" not in arrays or "meta/net" not in arrays:
            raise CheckpointError("checkpoint lacks model metadata")
        stored = NetConfig(**{f: int(v) for f, v in zip(_NET_FIELDS, arrays["meta/net"])})
        self.net_config = stored if config is None else config
        check_shapes(arrays, self.net_config)
        self.kind = "student" if arrays["meta/kind"][0] == KIND_STUDENT else "teacher"
        self.mean = arrays["norm/mean"]
        self.scale = arrays["norm/scale"]
        self.theta = _get(arrays, "theta/")
        self.lora = self.ema = self.optim = None
        if self.kind == "student":
            rank, alpha = arrays["lora/meta"]
            factors = {k: v for k, v in _get(arrays, "lora/").items() if k != "meta"}
            self.lora = LoraDelta(factors, int(rank), float(alpha))
            fast = _get(arrays, "ema/fast/")
            self.ema = EmaState(_get(arrays, "ema/slow/"), fast or None,
                                int(arrays["ema/iteration"][0]))
            lr, b1, b2, wd, eps, step = arrays["optim/hyper"]
            self.optim = OptimState(factors, lr, (b1, b2), wd, eps)
            self.optim.step = int(step)
            self.optim.m = _get(arrays, "optim/m/")
            self.optim.v = _get(arrays, "optim/v/")

    @classmethod
    def load(cls, path, config=None):
        return cls(load_checkpoint(path), config)

    @property
    def field(self):
        return VelocityField(self.net_config, self.theta, self.lora)

    @property
    def teacher_field(self):
        return VelocityField(self.net_config, self.theta)

    def to_teacher(self):
        """The frozen base weights as a fitted :class:`FlowMatchingTeacher`."""
        from .flow import FlowMatchingTeacher

        cfg = self.net_config
        t = FlowMatchingTeacher(hidden_dim=cfg.hidden_dim, num_hidden_layers=cfg.num_hidden_layers,
                                time_embed_dim=cfg.time_embed_dim)
        t.net_config_ = cfg
        t.theta_ = self.theta
        t.mean_ = self.mean
        t.scale_ = self.scale
        t.loss_curve_ = np.empty(0)
        return t

    def to_data(self, Z):
        return Z * self.scale + self.mean

    def to_standard(self, X):
        return (X - self.mean) / self.scale
