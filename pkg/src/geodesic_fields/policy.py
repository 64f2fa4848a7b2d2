"""Baselines, velocity composition and the geodesic-length evaluation harness."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence

import numpy as np

from .manifold import GeodesicPath, MetricField, Role, curve_length
from .rfm import BacktrackError, GridSpec, backtrack_grid, descend, solve_rfm

log = logging.getLogger(__name__)

NEAR, FAR = "NEAR", "FAR"
NEAR_MAX = math.pi
FAR_MIN = 2 * math.pi
PINV_DAMPING = 1e-8


@dataclass(frozen=True)
class PairBucket:
    label: str
    pairs: np.ndarray  # (n, 2, d): [:, 0] sources, [:, 1] goals

    def __post_init__(self):
        pairs = np.asarray(self.pairs, float)
        if pairs.ndim != 3 or pairs.shape[1] != 2:
            raise ValueError("pairs must have shape (n, 2, d)")
        object.__setattr__(self, "pairs", pairs)
        sep = np.linalg.norm(pairs[:, 1] - pairs[:, 0], axis=1)
        if self.label == NEAR and np.any(sep >= NEAR_MAX):
            raise ValueError("NEAR pairs must be closer than pi")
        if self.label == FAR and np.any(sep <= FAR_MIN):
            raise ValueError("FAR pairs must be farther apart than 2 pi")

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class EvalRow:
    method: str
    metric: str
    bucket: str
    mean: float
    std: float
    count: int
    failed: int

    COLUMNS = ("method", "metric", "bucket", "mean", "std", "count", "failed")

    def as_tuple(self):
        return (self.method, self.metric, self.bucket, self.mean, self.std, self.count, self.failed)


def euclidean_path(q_s, q_e, n_points: int = 200, field: MetricField = None) -> GeodesicPath:
    """Straight segment with ``n_points`` samples, measured under the path metric ``field``."""
    if n_points < 2:
        raise ValueError("need at least two points")
    q_s, q_e = np.asarray(q_s, float), np.asarray(q_e, float)
    t = np.linspace(0.0, 1.0, n_points)[:, None]
    pts = q_s + t * (q_e - q_s)
    if field is None:
        field = MetricField.constant(np.eye(len(q_s)))
    if field.role is not Role.PATH:
        field = field.dual()
    return curve_length(field, pts)


def nullspace_project(J, v, damping: float = PINV_DAMPING) -> np.ndarray:
    """``(I - J^+ J) v``.

    For full row rank ``J`` the projector comes from the SVD (exact up to
    rounding); otherwise a damped pseudoinverse is used.
    """
    J = np.atleast_2d(np.asarray(J, float))
    v = np.asarray(v, float)
    s = np.linalg.svd(J, compute_uv=False)
    if s.size and s[-1] > 1e-8 * max(s[0], 1e-300) and len(s) == J.shape[0]:
        _, _, Vt = np.linalg.svd(J, full_matrices=False)
        out = v - Vt.T @ (Vt @ v)
        # one refinement pass removes the rounding residual left by the first
        return out - Vt.T @ (Vt @ out)
    Jp = J.T @ np.linalg.inv(J @ J.T + damping * np.eye(J.shape[0]))
    return v - Jp @ (J @ v)


def smooth_velocity(prev, new, beta: float, max_norm: float) -> np.ndarray:
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    v = beta * np.asarray(prev, float) + (1 - beta) * np.asarray(new, float)
    n = float(np.linalg.norm(v))
    return v * (max_norm / n) if n > max_norm else v


def constrained_rollout(flow: Callable, constraint_jacobian: Callable, start, target, step: float = 0.01,
                        tol: float = 0.05, budget: int = 5000) -> GeodesicPath:
    """Follow ``-flow`` projected into the nullspace of a primary-task Jacobian.

    ``flow(q)`` is the ascent field (e.g. ``G_eik grad U``);
    ``constraint_jacobian(q)`` returns the task rows that must stay fixed.
    Segment lengths of the returned path are Euclidean.
    """

    def direction(q):
        return nullspace_project(constraint_jacobian(q), np.asarray(flow(q), float))

    pts, status = descend(direction, start, target, step, tol, budget)
    return curve_length(MetricField.constant(np.eye(len(pts[0]))), pts, status)


def sample_bucket(rng: np.random.Generator, label: str, n: int, low, high) -> PairBucket:
    """Uniform pairs over the box, rejected into the NEAR or FAR band."""
    low, high = np.asarray(low, float), np.asarray(high, float)
    d = len(low)
    out = np.empty((0, 2, d))
    while len(out) < n:
        cand = rng.uniform(low, high, (4096, 2, d))
        sep = np.linalg.norm(cand[:, 1] - cand[:, 0], axis=1)
        keep = sep < NEAR_MAX if label == NEAR else sep > FAR_MIN
        out = np.concatenate([out, cand[keep]])
    return PairBucket(label, out[:n])


def make_buckets(seed: int, n: int = 100, low=(-math.pi, -math.pi), high=(math.pi, math.pi)) -> List[PairBucket]:
    rng = np.random.default_rng(seed)
    return [sample_bucket(rng, NEAR, n, low, high), sample_bucket(rng, FAR, n, low, high)]


# -- methods: (path_field, eik_field, q_s, q_e) -> GeodesicPath ---------------

def euclidean_method(n_points: int = 200):
    def run(path_field, eik_field, q_s, q_e):
        return euclidean_path(q_s, q_e, n_points, path_field)

    return run


def rfm_method(spec: GridSpec, step: float = 0.01, tol: float = 0.05, **solver_kw):
    """Re-solve the grid from the lattice point nearest ``q_s`` and backtrack from ``q_e``."""

    def run(path_field, eik_field, q_s, q_e):
        grid = solve_rfm(path_field, spec, spec.nearest(q_s), **solver_kw)
        return backtrack_grid(grid, eik_field, q_e, step, tol)

    return run


def nes_method(net, step: float = 0.01, tol: float = 0.05):
    from .nes import backtrack_neural

    def run(path_field, eik_field, q_s, q_e):
        return backtrack_neural(net, eik_field, q_s, q_e, step, tol)

    return run


def evaluate_table(methods: Mapping[str, object], metrics: Mapping[str, tuple], buckets: Sequence[PairBucket],
                   seed: int = 0) -> List[EvalRow]:
    """Mean and standard deviation of path-metric geodesic lengths.

    ``methods`` maps a name to either a callable
    ``(path_field, eik_field, q_s, q_e) -> GeodesicPath`` or a dict keyed by
    metric name holding such callables (for per-metric models).
    ``metrics`` maps a name to ``(path_field, eik_field)``.  Paths that fail
    (stagnation or budget) are excluded and counted.  ``seed`` is recorded
    only for provenance; the buckets carry the randomness.
    """
    rows = []
    for mname, spec in methods.items():
        for metric_name, (path_field, eik_field) in metrics.items():
            run = spec[metric_name] if isinstance(spec, dict) else spec
            if run is None:
                continue
            for bucket in buckets:
                lengths, failed = [], 0
                for q_s, q_e in bucket.pairs:
                    try:
                        p = run(path_field, eik_field, q_s, q_e)
                    except BacktrackError as exc:
                        log.info("%s/%s/%s: excluded pair (%s)", mname, metric_name, bucket.label, exc.reason)
                        failed += 1
                        continue
                    lengths.append(p.total_length)
                if not lengths:
                    raise RuntimeError(f"bucket {bucket.label} is empty after filtering for {mname}/{metric_name}")
                a = np.array(lengths)
                rows.append(EvalRow(mname, metric_name, bucket.label, float(a.mean()), float(a.std()), len(a), failed))
    return rows


def write_table(path, rows: Sequence[EvalRow], command: str = "eval table1", seed=0):
    from .io import write_csv

    return write_csv(path, EvalRow.COLUMNS, [r.as_tuple() for r in rows], command, seed)
