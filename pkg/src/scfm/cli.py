"""Command-line entry point: ``scfm <subcommand> ...``."""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, LoadedModel, save_checkpoint, student_arrays, teacher_arrays
from .config import ConfigError, ExperimentConfig, parse_config, write_config
from .data import sample as sample_data
from .distill import MetricsRecord, Evaluator, SCFMDistiller, VARIANTS
from .flow import FlowMatchingTeacher
from .metrics import consistency_residual, sample_outputs, sliced_wasserstein, straightness
from .plot import line_svg, scatter_svg, write_svg
from .rng import Xoshiro256pp

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("scfm")


class PrerequisiteError(RuntimeError):
    pass


def _load_config(path):
    return parse_config(path) if path else ExperimentConfig()


def _outdir(args, config):
    out = args.out or config.output.dir
    os.makedirs(out, exist_ok=True)
    return out


def _load_model(path, what):
    if not path or not os.path.exists(path):
        raise PrerequisiteError(f"{what} checkpoint not found: {path}")
    return LoadedModel.load(path)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(row + "\n")


def _num(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def cmd_train_teacher(args):
    config = _load_config(args.config)
    out = _outdir(args, config)
    X, y = sample_data(config.dataset_spec())
    net, tc = config.net_config(), config.teacher
    teacher = FlowMatchingTeacher(hidden_dim=net.hidden_dim,
                                  num_hidden_layers=net.num_hidden_layers,
                                  time_embed_dim=net.time_embed_dim, n_iter=tc.iters,
                                  learning_rate=tc.lr, batch_size=tc.batch_size,
                                  label_dropout=tc.label_dropout, random_state=config.seed)

    def progress(it, loss):
        if (it + 1) % 1000 == 0:
            log.info("teacher iteration %d loss %.5f", it + 1, loss)

    teacher.fit(X, y, callback=progress)
    save_checkpoint(os.path.join(out, "teacher.ckpt"), teacher_arrays(teacher))
    _write_rows(os.path.join(out, "teacher_loss.csv"), "iteration,loss",
                (f"{i + 1},{_num(v)}" for i, v in enumerate(teacher.loss_curve_)))
    write_config(config, os.path.join(out, "config.toml"))
    log.info("wrote %s", out)
    return EXIT_OK


def _evaluator(config, teacher_field, Z, y):
    e = config.eval
    return Evaluator(teacher_field, Z, y, range(e.seeds), e.steps, e.teacher_steps, e.shift,
                     e.guidance, e.n_proj, e.residual_trials, seed=config.seed)


def cmd_distill(args):
    config = _load_config(args.config)
    if args.variant:
        config.distill.variant = args.variant
    if args.few_shot is not None:
        config.distill.few_shot = args.few_shot
    config.validate()
    loaded = _load_model(args.teacher, "teacher")
    if loaded.kind != "teacher":
        raise PrerequisiteError(f"{args.teacher} holds a student, not a teacher")
    out = _outdir(args, config)
    teacher = loaded.to_teacher()
    X, y = sample_data(config.dataset_spec())
    d = config.distill
    cc = loaded.net_config.class_count
    evaluator = None
    if d.eval_every:
        evaluator = _evaluator(config, loaded.teacher_field, loaded.to_standard(X),
                               y if cc else None)
    distiller = SCFMDistiller(
        teacher, variant=d.variant, n_iter=d.iters, batch_size=d.batch_size,
        teacher_fraction=d.teacher_fraction, mu_slow=d.mu_slow, mu_fast=d.mu_fast,
        restart_period=d.restart_period, grid_size=d.grid_size, shift_range=tuple(d.shift_range),
        guidance_range=tuple(d.guidance_range), learning_rate=d.lr, lora_rank=d.lora_rank,
        lora_alpha=d.lora_alpha, few_shot=d.few_shot or None, eval_every=d.eval_every,
        evaluator=evaluator, random_state=config.seed)
    last = [0]

    def progress(it, loss, est):
        last[0] = it
        if it % 500 == 0:
            log.info("distill iteration %d loss %.6f", it, loss)

    try:
        distiller.fit(X, y, callback=progress)
    except NonFiniteError as e:
        raise NonFiniteError(f"{e}; last finite iteration {last[0]}") from None
    save_checkpoint(os.path.join(out, "student.ckpt"), student_arrays(distiller))
    rows = []
    for rec in distiller.history_:
        if not config.output.record_seconds:
            rec.seconds = 0.0
        rows.append(rec.csv_row())
    _write_rows(os.path.join(out, "metrics.csv"), MetricsRecord.CSV_HEADER, rows)
    write_config(config, os.path.join(out, "config.toml"))
    log.info("wrote %s", out)
    return EXIT_OK


def _parse_steps(text):
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--steps expects comma-separated integers, got {text!r}") from None
    if not steps or min(steps) < 1:
        raise ConfigError("--steps needs positive step counts")
    return steps


def cmd_eval(args):
    config = _load_config(args.config)
    steps = _parse_steps(args.steps)
    teacher = _load_model(args.teacher, "teacher")
    student = _load_model(args.student, "student")
    e = config.eval
    cc = teacher.net_config.class_count
    g = e.guidance if cc else None
    seeds = range(e.seeds)
    ref = sample_outputs(teacher.teacher_field, seeds, e.teacher_steps, e.shift, g, cc)
    holdout_spec = config.dataset_spec()
    holdout_spec.seed = e.holdout_seed
    H, Hy = sample_data(holdout_spec)
    Hz = teacher.to_standard(H)
    ridx = Xoshiro256pp.substream(config.seed, "eval/residual-data").integers(len(Hz), 256)
    from .flow import make_grid, shift_grid
    grid = shift_grid(make_grid(e.teacher_steps), e.shift)
    rows = []
    for name, model in (("teacher", teacher.teacher_field), ("student", student.field)):
        res = consistency_residual(model, Hz[ridx], Hy[ridx] if cc else None, grid,
                                   e.residual_trials,
                                   Xoshiro256pp.substream(config.seed, "eval/residual"), g)
        for k in sorted(set(steps) | {128}):
            traj = sample_outputs(model, seeds, k, e.shift, g, cc, return_trajectory=True)
            fid = sliced_wasserstein(ref, traj[-1], e.n_proj, config.seed)
            plain = sample_outputs(model, seeds, k, e.shift, None, cc)
            data_sw = sliced_wasserstein(teacher.to_data(plain), H, e.n_proj, config.seed)
            rows.append(",".join([name, str(k), _num(fid), _num(data_sw),
                                  _num(straightness(traj)), _num(res)]))
    header = "model,steps,fid_sw,data_sw,straightness,residual"
    if args.out:
        _write_rows(args.out, header, rows)
    else:
        sys.stdout.write(header + "\n" + "".join(r + "\n" for r in rows))
    return EXIT_OK


def _model_samples(model, seeds, steps, shift, guidance):
    cc = model.net_config.class_count
    field = model.field if model.kind == "student" else model.teacher_field
    from .flow import seeded_noise
    _, labels = seeded_noise(seeds, model.net_config.input_dim, cc)
    Z = sample_outputs(field, seeds, steps, shift, guidance if cc else None, cc)
    return model.to_data(Z), labels


def cmd_sample(args):
    model = _load_model(args.ckpt, "model")
    if args.steps < 1 or args.count < 1:
        raise ConfigError("--steps and --count must be >= 1")
    seeds = range(args.seed, args.seed + args.count)
    X, labels = _model_samples(model, seeds, args.steps, args.shift, args.guidance)
    if args.out.endswith(".svg"):
        classes = sorted(set(labels.tolist()))
        layers = [(f"label {c}", X[labels == c]) for c in classes]
        write_svg(args.out, scatter_svg(layers, f"{model.kind}, {args.steps} steps"))
    else:
        _write_rows(args.out, "x0,x1,label",
                    (f"{_num(a)},{_num(b)},{int(c)}" for (a, b), c in zip(X, labels)))
    return EXIT_OK


def cmd_plot(args):
    config = _load_config(args.config)
    out = _outdir(args, config)
    e = config.eval
    X, _ = sample_data(config.dataset_spec())
    seeds = range(e.seeds)
    layers = [("data", X[:e.seeds])]
    if args.teacher:
        teacher = _load_model(args.teacher, "teacher")
        layers.append((f"teacher {e.teacher_steps}",
                       _model_samples(teacher, seeds, e.teacher_steps, e.shift, e.guidance)[0]))
    if args.student:
        student = _load_model(args.student, "student")
        k = args.student_steps
        layers.append((f"student {k}", _model_samples(student, seeds, k, e.shift, e.guidance)[0]))
    write_svg(os.path.join(out, "samples.svg"), scatter_svg(layers, "data / teacher / student"))
    if args.metrics:
        if not os.path.exists(args.metrics):
            raise PrerequisiteError(f"metrics file not found: {args.metrics}")
        with open(args.metrics, newline="") as f:
            rows = list(csv.DictReader(f))
        it = [float(r["iteration"]) for r in rows]
        series = [(col, (it, [float(r[col]) for r in rows]))
                  for col in ("fid_sw_3", "fid_sw_4", "fid_sw_8")]
        write_svg(os.path.join(out, "fidelity.svg"), line_svg(series, "fidelity vs iteration"))
        write_svg(os.path.join(out, "residual.svg"),
                  line_svg([("residual", (it, [float(r["residual"]) for r in rows]))],
                           "consistency residual vs iteration"))
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import TOLERANCE, run_probes

    results = run_probes(args.probes, args.seed)
    worst = max(r.error for r in results)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"probe {r.index} ({r.mode}): relative error {r.error:.3e} FAIL")
    status = "PASS" if not failed else "FAIL"
    print(f"grad-check {status}: {len(results) - len(failed)}/{len(results)} probes within "
          f"{TOLERANCE:g}, worst {worst:.3e}")
    return EXIT_OK if not failed else EXIT_FAIL


def build_parser():
    p = argparse.ArgumentParser(prog="scfm", description="Shortcut distillation lab for 2-D flows")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-teacher", help="fit the flow-matching teacher")
    s.add_argument("--config")
    s.add_argument("--out", help="output directory (default from config)")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="distill a teacher checkpoint into a few-step student")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--few-shot", type=int, dest="few_shot")
    s.add_argument("--out")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval", help="fidelity / straightness / residual table")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--steps", default="3,4,8")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw seeded samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int, default=4)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shift", type=float, default=3.0)
    s.add_argument("--guidance", type=float, default=2.0)
    s.add_argument("--out", required=True, help="*.csv or *.svg")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("plot", help="SVG overlays and metric curves")
    s.add_argument("--config")
    s.add_argument("--teacher")
    s.add_argument("--student")
    s.add_argument("--student-steps", type=int, default=4, dest="student_steps")
    s.add_argument("--metrics", help="metrics.csv from distill")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("grad-check", help="finite-difference gradient probes")
    s.add_argument("--probes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, PrerequisiteError, CheckpointError) as e:
        print(f"scfm: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"scfm: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
