"""Distribution distance, trajectory straightness, self-consistency and teacher-student fidelity."""

import warnings

import numpy as np

from .autodiff import NonFiniteError
from .flow import euler_sample, interpolate, make_grid, seeded_noise, shift_grid
from .rng import Xoshiro256pp

PROJECTION_STREAM = "metrics/projections"


def projection_directions(n_proj, seed, dim=2):
    g = Xoshiro256pp.substream(seed, PROJECTION_STREAM)
    v = g.normal((n_proj, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _w2_1d(a, b):
    """Exact 2-Wasserstein distance between two sorted 1-D empirical samples."""
    n, m = len(a), len(b)
    if n == m:
        return np.sqrt(np.mean((a - b) ** 2))
    # piecewise-constant quantile functions integrated over the merged breakpoints
    qs = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate([[0.0], qs]))
    mids = qs - widths / 2
    ia = np.minimum((mids * n).astype(np.int64), n - 1)
    ib = np.minimum((mids * m).astype(np.int64), m - 1)
    return np.sqrt(np.sum(widths * (a[ia] - b[ib]) ** 2))


def _project(P, dirs):
    # coordinate-wise sum rather than BLAS so each row's value is independent of row order
    out = P[:, :1] * dirs[:, 0]
    for j in range(1, P.shape[1]):
        out = out + P[:, j:j + 1] * dirs[:, j]
    return out


def sliced_wasserstein(A, B, n_proj=128, seed=0):
    """Mean over seeded unit directions of the 1-D W2 distance of the projections."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("point sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ValueError("point sets differ in dimension")
    dirs = projection_directions(n_proj, seed, A.shape[1])
    pa = np.sort(_project(A, dirs), axis=0)
    pb = np.sort(_project(B, dirs), axis=0)
    return float(np.mean([_w2_1d(pa[:, k], pb[:, k]) for k in range(n_proj)]))


def straightness(trajectory):
    """Mean over samples of (path length / chord) - 1 for ``(n+1, b, dim)`` trajectories.

    Zero-chord samples are excluded with a warning.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim == 2:
        traj = traj[:, None, :]
    if traj.shape[0] < 2:
        raise ValueError("trajectory needs at least one step")
    length = np.linalg.norm(np.diff(traj, axis=0), axis=2).sum(axis=0)
    chord = np.linalg.norm(traj[-1] - traj[0], axis=1)
    ok = chord > 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-chord trajectories excluded from straightness")
    if not ok.any():
        raise ValueError("every trajectory has zero chord")
    return float(np.mean(length[ok] / chord[ok] - 1.0))


def consistency_residual(field, X, labels, grid, trials, rng, guidance=None, skips=None):
    """Mean squared gap between ``field`` and its own two-interval target.

    For random triples on ``grid`` (skips are powers of two up to ``n/4``),
    compares the velocity at ``(x_t1, t1)`` with the interval-weighted average
    of the velocities at ``t1`` and at ``t2`` after one Euler step.
    """
    from .distill import sample_triples, scfm_target

    if trials < 1:
        raise ValueError("trials must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if skips is None:
        skips = [1 << i for i in range(max(1, int(np.log2(max(grid.n // 4, 1))) + 1))]
    total = 0.0
    for _ in range(trials):
        b = len(X)
        skip = np.asarray(skips)[rng.integers(len(skips), b)]
        t1, t2, t3 = sample_triples(grid, skip, rng)
        xt1 = interpolate(X, rng.normal(X.shape), t1)
        target = scfm_target(field, field, xt1, (t1, t2, t3), labels, guidance)
        v = field(xt1, t1, labels, guidance)
        total += np.mean(np.sum((v - target) ** 2, axis=1))
    out = total / trials
    if not np.isfinite(out):
        raise NonFiniteError("consistency residual is not finite")
    return float(out)


def sample_outputs(field, seeds, steps, shift=3.0, guidance=None, class_count=0, dim=2,
                   return_trajectory=False):
    """Seed-matched Euler samples of ``field`` (standardized coordinates)."""
    z, labels = seeded_noise(seeds, dim, class_count)
    traj = euler_sample(field, shift_grid(make_grid(steps), shift), z,
                        labels if class_count else None, guidance)
    return traj if return_trajectory else traj[-1]


def teacher_student_fidelity(teacher, student, seeds, steps_teacher=128, steps_student=4,
                             guidance=2.0, shift=3.0, n_proj=128, proj_seed=0,
                             teacher_samples=None):
    """Sliced W2 between teacher and student samples driven by the same seeds."""
    if len(seeds) == 0:
        raise ValueError("seed list is empty")
    cc = student.config.class_count
    g = guidance if cc else None
    if teacher_samples is None:
        teacher_samples = sample_outputs(teacher, seeds, steps_teacher, shift, g, cc)
    student_samples = sample_outputs(student, seeds, steps_student, shift, g, cc)
    return sliced_wasserstein(teacher_samples, student_samples, n_proj, proj_seed)
