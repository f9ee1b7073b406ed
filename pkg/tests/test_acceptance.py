"""End-to-end acceptance checks on the reference gaussians8 setup.

Each test reports one PASS/FAIL line through ``conftest.record`` and asserts
the same condition. Heavy artifacts (teacher, distilled students) are shared
through module fixtures.
"""

import os
import time

import numpy as np
import pytest

from conftest import record
from scfm.cli import main
from scfm.data import DatasetSpec, sample
from scfm.distill import EmaState, Evaluator, SCFMDistiller, ema_update, interval_weighted
from scfm.flow import FlowMatchingTeacher, PathSample, euler_sample, interpolate, make_grid, shift_grid, shift_time
from scfm.gradcheck import TOLERANCE, run_probes
from scfm.metrics import sliced_wasserstein
from scfm.network import LoraDelta, NetConfig, VelocityField, guided, init_theta, merge_params
from scfm.rng import Xoshiro256pp
from scfm.shortcut import ShortcutModel, sc_target

pytestmark = pytest.mark.slow

SEEDS = range(10000)
# first verified run: 20k-iteration teacher, 128 shifted steps, unguided, vs 10k held-out points
BASELINE_SW = 0.0961


class ConstantField:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=np.float64)

    def __call__(self, x, t, c=None, w=None, d=None):
        return np.broadcast_to(self.v, np.shape(x)).copy()


@pytest.fixture(scope="module")
def data():
    X, y = sample(DatasetSpec())
    H, _ = sample(DatasetSpec(seed=1))
    return X, y, H


@pytest.fixture(scope="module")
def teacher(data):
    X, y, _ = data
    t0 = time.perf_counter()
    model = FlowMatchingTeacher(n_iter=20000).fit(X, y)
    model.fit_seconds_ = time.perf_counter() - t0
    return model


@pytest.fixture(scope="module")
def evaluator(teacher, data):
    X, y, _ = data
    return Evaluator(teacher.field_, (X - teacher.mean_) / teacher.scale_, y, SEEDS)


@pytest.fixture(scope="module")
def distilled(teacher, evaluator, data):
    X, y, _ = data
    t0 = time.perf_counter()
    est = SCFMDistiller(teacher, variant="fast-slow", n_iter=5000, eval_every=5000,
                        evaluator=evaluator).fit(X, y)
    return est, time.perf_counter() - t0


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    results = run_probes(100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.error for r in results)
    ok = len(results) == 100 and worst <= TOLERANCE and elapsed < 10
    record(1, ok, f"100 probes, worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_2_ema_on_adapters_matches_full_parameter_ema():
    t0 = time.perf_counter()
    config = NetConfig(class_count=8)
    g = Xoshiro256pp.substream(0, "acceptance/ema")
    theta = init_theta(config, g)
    lora = LoraDelta.init(config, 4, None, g)
    lora.factors = {k: v + 0.01 * g.normal(v.shape) for k, v in lora.factors.items()}
    state = EmaState.init(lora)
    oracle = merge_params(theta, lora)
    for _ in range(100):
        lora.factors = {k: v + 0.05 * g.normal(v.shape) for k, v in lora.factors.items()}
        mu = 0.9 + 0.0999 * g.random()
        state.slow = ema_update(state.slow, lora, mu)
        current = merge_params(theta, lora)
        oracle = {k: mu * oracle[k] + (1 - mu) * current[k] for k in oracle}
    merged = merge_params(theta, state.slow)
    err = max(np.abs(merged[k] - oracle[k]).max() for k in oracle)
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-10 and elapsed < 1
    record(2, ok, f"max elementwise gap {err:.2e}, {elapsed:.2f} s")
    assert ok


def test_3_formula_suite():
    t0 = time.perf_counter()
    g = Xoshiro256pp.substream(0, "acceptance/formulas")
    x0, x1 = g.normal((64, 2)), g.normal((64, 2))
    checks = {}
    checks["path endpoints"] = (np.array_equal(interpolate(x0, x1, 0.0), x0)
                                and np.array_equal(interpolate(x0, x1, 1.0), x1))
    checks["velocity target"] = np.array_equal(PathSample.build(x0, x1, g.random(64)).v_target,
                                               x1 - x0)
    tele = True
    for n in (1, 2, 3, 7, 16, 128):
        for s in (1.0, 2.5, 4.5):
            v = g.normal(2)
            out = euler_sample(ConstantField(v), shift_grid(make_grid(n), s), x1)[-1]
            tele &= np.abs(out - (x1 - v)).max() <= 1e-12
    checks["constant-field telescoping"] = tele

    def two_valued(x, t, c=None, w=None, d=None):
        return np.full(np.shape(x), 1.0 if np.all(np.asarray(t) == 1.0) else 3.0)
    checks["equal-weight mean"] = np.array_equal(sc_target(two_valued, x0[:1], 1.0, 0.25),
                                                 [[2.0, 2.0]])
    checks["convex weights"] = np.array_equal(
        interval_weighted(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), [0.1], [0.3]),
        [[0.25, 0.75]])
    vc, vn = g.normal((5, 2)), g.normal((5, 2))
    checks["guidance w=0"] = np.array_equal(guided(vc, vn, 0.0), vc)
    checks["shift fixed points"] = (shift_time(0.0, 3.0) == 0.0 and shift_time(1.0, 3.0) == 1.0
                                    and shift_time(0.5, 3.0) == 0.75)
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 1
    record(3, ok, f"{len(checks) - len(failed)}/{len(checks)} exact checks"
           + (f", failed: {', '.join(failed)}" if failed else "") + f", {elapsed:.2f} s")
    assert ok


def test_4_teacher_quality(teacher, data):
    _, _, H = data
    sw = sliced_wasserstein(teacher.sample(SEEDS, steps=128), H)
    ok = sw <= BASELINE_SW * 1.2 and teacher.fit_seconds_ <= 15 * 60
    record(4, ok, f"SW to held-out data {sw:.4f}, bound {BASELINE_SW * 1.2:.4f}, "
           f"fit {teacher.fit_seconds_:.0f} s")
    assert ok


def test_5_distillation_effectiveness(teacher, evaluator, distilled):
    est, seconds = distilled
    gains = {}
    for k in (4, 8):
        base = evaluator.fidelity(teacher.field_, k)
        gains[k] = 1 - evaluator.fidelity(est.field_, k) / base
    ok = gains[4] >= 0.30 and gains[8] >= 0.20 and seconds <= 30 * 60
    record(5, ok, f"improvement 4-step {gains[4]:.1%} (need 30%), 8-step {gains[8]:.1%} "
           f"(need 20%), {seconds:.0f} s")
    assert ok


def test_6_straightening(teacher, evaluator, distilled):
    est, _ = distilled
    s_teacher = evaluator.straightness(teacher.field_, 4)
    s_student = evaluator.straightness(est.field_, 4)
    r0, r_end = est.history_[0].residual, est.history_[-1].residual
    drop = 1 - r_end / r0
    ok = s_student < s_teacher and drop >= 0.5
    record(6, ok, f"straightness {s_student:.4f} vs teacher {s_teacher:.4f}, "
           f"residual drop {drop:.1%} (need 50%)")
    assert ok


def _curve(teacher, evaluator, X, y, variant, seed):
    curve = {}

    def cb(it, loss, est):
        if it % 100 == 0:
            curve[it] = evaluator.fidelity(est.field_, 8)
    SCFMDistiller(teacher, variant=variant, n_iter=2000, random_state=seed).fit(X, y, callback=cb)
    return curve


def test_7_fast_slow_speedup(teacher, evaluator, data):
    X, y, _ = data
    hits, notes = 0, []
    for seed in (0, 1, 2):
        target = _curve(teacher, evaluator, X, y, "vanilla", seed)[2000]
        fast = _curve(teacher, evaluator, X, y, "fast-slow", seed)
        reached = min((it for it, v in fast.items() if v <= target), default=None)
        hits += reached is not None and reached <= 1600
        notes.append(f"seed {seed}: target {target:.4f}, reached at {reached}")
    ok = hits >= 2
    record(7, ok, f"{hits}/3 seeds within 1600 iterations; " + "; ".join(notes))
    assert ok


def test_8_cyclic_restart_late_stage(teacher, evaluator, data):
    X, y, _ = data
    wins, notes = 0, []
    for seed in (0, 1, 2):
        fid = {}
        for variant in ("cyclic", "fast-slow"):
            est = SCFMDistiller(teacher, variant=variant, n_iter=10000, restart_period=500,
                                random_state=seed).fit(X, y)
            fid[variant] = evaluator.fidelity(est.field_, 8)
        wins += fid["cyclic"] >= fid["fast-slow"]
        notes.append(f"seed {seed}: cyclic {fid['cyclic']:.4f} vs fast-slow {fid['fast-slow']:.4f}")
    ok = wins >= 2
    record(8, ok, f"{wins}/3 seeds cyclic no better; " + "; ".join(notes))
    assert ok


def test_9_few_shot(teacher, evaluator, distilled, data):
    X, y, _ = data
    full, _ = distilled
    t0 = time.perf_counter()
    few = SCFMDistiller(teacher, variant="fast-slow", n_iter=5000, few_shot=10).fit(X, y)
    seconds = time.perf_counter() - t0
    f_full = evaluator.fidelity(full.field_, 8)
    f_few = evaluator.fidelity(few.field_, 8)
    ok = f_few <= 2 * f_full and seconds <= 30 * 60
    record(9, ok, f"8-step fidelity few-shot {f_few:.4f} vs full {f_full:.4f} "
           f"(ratio {f_few / f_full:.2f}), {seconds:.0f} s")
    assert ok


def test_10_shortcut_baseline(teacher, data):
    X, y, H = data
    shortcut = ShortcutModel(n_iter=20000).fit(X, y)
    sw_short = sliced_wasserstein(shortcut.sample(SEEDS, steps=1), H)
    sw_teacher = sliced_wasserstein(teacher.sample(SEEDS, steps=1), H)
    ok = sw_short < sw_teacher
    record(10, ok, f"1-step SW to data: shortcut {sw_short:.4f} vs teacher {sw_teacher:.4f}")
    assert ok


CLI_CONFIG = """seed = 5
[data]
size = 1000
[net]
hidden_dim = 16
num_hidden_layers = 2
time_embed_dim = 8
[teacher]
iters = 100
[distill]
variant = "cyclic"
iters = 60
restart_period = 20
grid_size = 32
eval_every = 20
[eval]
seeds = 200
teacher_steps = 32
residual_trials = 1
"""


def _pipeline(root, cfg):
    os.makedirs(root, exist_ok=True)
    teacher, student = os.path.join(root, "teacher.ckpt"), os.path.join(root, "student.ckpt")
    codes = [
        main(["train-teacher", "--config", cfg, "--out", root]),
        main(["distill", "--config", cfg, "--teacher", teacher, "--out", root]),
        main(["eval", "--config", cfg, "--teacher", teacher, "--student", student,
              "--steps", "3,4,8", "--out", os.path.join(root, "eval.csv")]),
        main(["sample", "--ckpt", student, "--steps", "4", "--count", "300", "--seed", "7",
              "--out", os.path.join(root, "samples.csv")]),
        main(["sample", "--ckpt", teacher, "--steps", "8", "--count", "300",
              "--out", os.path.join(root, "samples.svg")]),
        main(["plot", "--config", cfg, "--teacher", teacher, "--student", student,
              "--metrics", os.path.join(root, "metrics.csv"), "--out", os.path.join(root, "plots")]),
    ]
    files = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = f.read()
    return codes, files


def test_11_reproducibility(tmp_path, monkeypatch):
    monkeypatch.delenv("SCFM_SEED", raising=False)
    cfg = tmp_path / "exp.toml"
    cfg.write_text(CLI_CONFIG)
    codes_a, a = _pipeline(str(tmp_path / "a"), str(cfg))
    codes_b, b = _pipeline(str(tmp_path / "b"), str(cfg))
    differ = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(b) - set(a))
    ok = codes_a == codes_b == [0] * 6 and not differ and len(a) >= 10
    record(11, ok, f"{len(a)} files from 6 subcommand runs, "
           + (f"differing: {', '.join(differ)}" if differ else "all byte-identical"))
    assert ok
