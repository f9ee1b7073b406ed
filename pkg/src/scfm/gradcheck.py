"""Randomized finite-difference probes of the tape gradients through the velocity network."""

from dataclasses import dataclass

import numpy as np

from .autodiff import finite_diff_check
from .network import LoraDelta, NetConfig, init_theta, mlp, net_features
from .rng import Xoshiro256pp

TOLERANCE = 1e-4


@dataclass
class ProbeResult:
    index: int
    mode: str
    error: float

    @property
    def passed(self):
        return self.error <= TOLERANCE


def _probe(g, index):
    layers = 1 + int(g.integers(3))
    hidden = 2 + int(g.integers(5))
    classes = int(g.integers(3))
    config = NetConfig(hidden_dim=hidden, num_hidden_layers=layers, time_embed_dim=4,
                       class_count=classes)
    b = 1 + int(g.integers(3))
    x = g.normal((b, 2))
    t = g.random(b)
    c = g.integers(classes, b) if classes else None
    target = g.normal((b, 2))
    feats = net_features(config, x, t, c)
    theta = init_theta(config, g)
    theta = {k: v + 0.1 * g.normal(v.shape) for k, v in theta.items()}
    mode = ("weights", "lora", "inputs")[index % 3]

    if mode == "weights":
        def f(tape, p):
            return tape.mse(mlp(tape, tape.leaf(feats), config, p), tape.leaf(target))
        return mode, finite_diff_check(f, theta)
    if mode == "lora":
        lora = LoraDelta.init(config, 2, None, g)
        factors = {k: v + 0.3 * g.normal(v.shape) for k, v in lora.factors.items()}

        def f(tape, p):
            fixed = {k: tape.leaf(v) for k, v in theta.items()}
            out = mlp(tape, tape.leaf(feats), config, fixed, p, lora.scale)
            return tape.mse(out, tape.leaf(target))
        return mode, finite_diff_check(f, factors)

    def f(tape, h):
        fixed = {k: tape.leaf(v) for k, v in theta.items()}
        return tape.mse(mlp(tape, h, config, fixed), tape.leaf(target))
    return mode, finite_diff_check(f, feats)


def run_probes(count=100, seed=0):
    """``count`` random small networks and inputs, cycling over what is differentiated."""
    g = Xoshiro256pp.substream(seed, "grad-check")
    out = []
    for i in range(count):
        mode, err = _probe(g, i)
        out.append(ProbeResult(i, mode, err))
    return out
