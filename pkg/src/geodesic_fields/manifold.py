"""Differential-geometry core: metric fields, Christoffel symbols,
Laplace-Beltrami operator, curve functionals and a geodesic ODE integrator.

Configurations and tangent vectors are plain 1-D ``numpy`` arrays.  Metric
evaluators broadcast over leading batch dimensions: ``(..., d) -> (..., d, d)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

FD_STEP = 1e-5
SYMMETRY_TOL = 1e-9


class MetricError(ValueError):
    """Raised for non-SPD, singular or mis-shaped metric tensors."""


class Role(str, enum.Enum):
    PATH = "path"
    EIKONAL = "eikonal"

    @property
    def dual(self) -> "Role":
        return Role.EIKONAL if self is Role.PATH else Role.PATH


def as_metric(G, check: bool = True) -> np.ndarray:
    """Symmetrize ``G`` and (optionally) verify it is positive definite."""
    G = np.asarray(G, dtype=float)
    if G.ndim < 2 or G.shape[-1] != G.shape[-2]:
        raise MetricError(f"metric must be square, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise MetricError("metric has non-finite entries")
    asym = np.max(np.abs(G - np.swapaxes(G, -1, -2))) if G.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(G)))):
        raise MetricError(f"metric not symmetric (max asymmetry {asym:.3g})")
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    if check:
        lam = np.linalg.eigvalsh(G)
        if np.any(lam[..., 0] <= 0):
            raise MetricError(f"metric not positive definite (min eigenvalue {np.min(lam[..., 0]):.3g})")
    return G


@dataclass(frozen=True)
class MetricField:
    """A smooth map from configurations to SPD matrices.

    ``derivative(q)`` (optional) returns an array ``dG`` of shape ``(..., d, d, d)``
    with ``dG[..., k, :, :] = dG/dq_k``.  ``traced`` (optional) is the same
    formula written against ``jax.numpy`` so the neural solver can differentiate
    through it.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    role: Role = Role.PATH
    derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    traced: Optional[Callable] = None
    dim: int = 2
    name: str = ""
    _dual: Optional["MetricField"] = dc_field(default=None, repr=False, compare=False)

    def __call__(self, q) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(q, dtype=float)), dtype=float)

    def metric(self, q) -> np.ndarray:
        """Evaluate and validate (symmetric, positive definite)."""
        return as_metric(self(q))

    def jacobian(self, q, h: float = FD_STEP) -> np.ndarray:
        """``dG/dq_k`` stacked on axis -3; analytic when available, else central differences."""
        q = np.asarray(q, dtype=float)
        if self.derivative is not None:
            return np.asarray(self.derivative(q), dtype=float)
        d = q.shape[-1]
        out = []
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            out.append((self(q + e) - self(q - e)) / (2 * h))
        return np.stack(out, axis=-3)

    def dual(self) -> "MetricField":
        """The pointwise-inverse field with the opposite role."""
        if self._dual is not None:
            return self._dual
        return inverse_field(self)

    @classmethod
    def constant(cls, G, role: Role = Role.PATH, name: str = "constant") -> "MetricField":
        G = as_metric(G)
        d = G.shape[0]

        def ev(q):
            q = np.asarray(q)
            return np.broadcast_to(G, q.shape[:-1] + (d, d)).copy()

        def der(q):
            q = np.asarray(q)
            return np.zeros(q.shape[:-1] + (d, d, d))

        def traced(q):
            import jax.numpy as jnp

            return jnp.asarray(G)

        return cls(ev, role, der, traced, d, name)

    @classmethod
    def from_pointwise(cls, fn, role: Role = Role.PATH, dim: int = 2, derivative=None, name: str = "") -> "MetricField":
        """Wrap a single-point evaluator so it broadcasts over batch axes."""

        def batched(f, tail):
            def ev(q):
                q = np.asarray(q, dtype=float)
                if q.ndim == 1:
                    return np.asarray(f(q), dtype=float)
                flat = q.reshape(-1, q.shape[-1])
                out = np.stack([np.asarray(f(x), dtype=float) for x in flat])
                return out.reshape(q.shape[:-1] + tail)

            return ev

        der = batched(derivative, (dim, dim, dim)) if derivative is not None else None
        return cls(batched(fn, (dim, dim)), role, der, None, dim, name)


def inverse_field(field: MetricField) -> MetricField:
    """Pointwise inverse; derivative via ``d(G^-1) = -G^-1 dG G^-1``."""

    def ev(q):
        return np.linalg.inv(field(q))

    der = None
    if field.derivative is not None:

        def der(q):
            Gi = np.linalg.inv(field(q))
            dG = field.jacobian(q)
            return -np.einsum("...ab,...kbc,...cd->...kad", Gi, dG, Gi)

    traced = None
    if field.traced is not None:

        def traced(q):
            import jax.numpy as jnp

            return jnp.linalg.inv(field.traced(q))

    return MetricField(ev, field.role.dual, der, traced, field.dim, f"inv({field.name})", _dual=field)


def _check_dims(*vecs):
    shapes = {np.shape(v)[-1] for v in vecs}
    if len(shapes) != 1:
        raise MetricError(f"dimension mismatch: {sorted(shapes)}")


def inner_product(u, v, G) -> float:
    u, v, G = np.asarray(u, float), np.asarray(v, float), np.asarray(G, float)
    _check_dims(u, v, G)
    if G.shape[-1] != G.shape[-2]:
        raise MetricError("metric must be square")
    # summing both orders makes the result exactly symmetric in u and v
    return float(0.5 * ((u @ G) @ v + (v @ G) @ u))


def metric_norm(u, G) -> float:
    sq = inner_product(u, u, G)
    if sq < -1e-12:
        raise MetricError(f"negative squared norm {sq:.3g}: metric is not SPD")
    return float(np.sqrt(max(sq, 0.0)))


def christoffel(field: MetricField, q) -> np.ndarray:
    """Christoffel symbols of the second kind, ``gamma[i, j, k] = Gamma^i_{jk}``."""
    q = np.asarray(q, dtype=float)
    G = field.metric(q)
    try:
        Gi = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"singular metric at {q}") from exc
    dG = field.jacobian(q)  # dG[k, l, j] = d G_lj / d q_k
    # first kind: [l, j, k] = d_k G_lj + d_j G_lk - d_l G_jk
    first = np.einsum("klj->ljk", dG) + np.einsum("jlk->ljk", dG) - dG
    return 0.5 * np.einsum("il,ljk->ijk", Gi, first)


def laplace_beltrami(field: MetricField, f, q) -> float:
    """``G^{ij} (d_ij f - Gamma^k_ij d_k f)`` at ``q``.

    ``f`` must expose ``gradient(q)`` and ``hessian(q)``; see
    :func:`finite_difference_function` for wrapping a plain callable.
    """
    q = np.asarray(q, dtype=float)
    Gi = np.linalg.inv(field.metric(q))
    gamma = christoffel(field, q)
    g = np.asarray(f.gradient(q), dtype=float)
    H = np.asarray(f.hessian(q), dtype=float)
    return float(np.einsum("ij,ij->", Gi, H - np.einsum("kij,k->ij", gamma, g)))


@dataclass(frozen=True)
class finite_difference_function:
    """Adapter giving a plain scalar callable central-difference derivatives."""

    fn: Callable[[np.ndarray], float]
    h: float = 1e-4

    def __call__(self, q):
        return self.fn(q)

    def gradient(self, q):
        q = np.asarray(q, dtype=float)
        out = np.empty_like(q)
        for i in range(q.size):
            e = np.zeros_like(q)
            e[i] = self.h
            out[i] = (self.fn(q + e) - self.fn(q - e)) / (2 * self.h)
        return out

    def hessian(self, q):
        q = np.asarray(q, dtype=float)
        d, h = q.size, self.h
        H = np.empty((d, d))
        f0 = self.fn(q)
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h
            H[i, i] = (self.fn(q + ei) - 2 * f0 + self.fn(q - ei)) / h**2
            for j in range(i + 1, d):
                ej = np.zeros(d)
                ej[j] = h
                H[i, j] = H[j, i] = (
                    self.fn(q + ei + ej) - self.fn(q + ei - ej) - self.fn(q - ei + ej) + self.fn(q - ei - ej)
                ) / (4 * h * h)
        return H


@dataclass(frozen=True)
class GeodesicPath:
    points: np.ndarray  # (n, d)
    segment_lengths: np.ndarray  # (n - 1,)
    total_length: float
    status: str = "ok"

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("a path needs at least one point")

    def __len__(self):
        return len(self.points)

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.segment_lengths)])


def segment_lengths(field: MetricField, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return np.zeros(0)
    steps = np.diff(pts, axis=0)
    G = field(0.5 * (pts[1:] + pts[:-1]))
    sq = np.einsum("ni,nij,nj->n", steps, G, steps)
    if np.any(sq < -1e-12):
        raise MetricError("metric not SPD along path")
    return np.sqrt(np.maximum(sq, 0.0))


def curve_length(field: MetricField, points, status: str = "ok") -> GeodesicPath:
    """Polyline length with the metric sampled at each segment midpoint."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    seg = segment_lengths(field, pts)
    return GeodesicPath(pts, seg, float(np.sum(seg)), status)


def curve_energy(field: MetricField, points, dt: float) -> float:
    if dt <= 0:
        raise ValueError("dt must be positive")
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        raise ValueError("curve energy needs at least two points")
    vel = np.diff(pts, axis=0) / dt
    G = field(0.5 * (pts[1:] + pts[:-1]))
    return float(0.5 * np.sum(np.einsum("ni,nij,nj->n", vel, G, vel)) * dt)


def integrate_geodesic_ode(field: MetricField, q0, v0, T: float, steps: int) -> GeodesicPath:
    """Classical RK4 on ``x'' = -Gamma(x)[v, v]`` with a fixed step ``T / steps``."""
    if steps < 1 or T <= 0:
        raise ValueError("need steps >= 1 and T > 0")
    x = np.asarray(q0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    dt = T / steps

    def rhs(x, v):
        return v, -np.einsum("ijk,j,k->i", christoffel(field, x), v, v)

    pts = [x.copy()]
    for _ in range(steps):
        k1x, k1v = rhs(x, v)
        k2x, k2v = rhs(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
        k3x, k3v = rhs(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
        k4x, k4v = rhs(x + dt * k3x, v + dt * k3v)
        x = x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        pts.append(x.copy())
    return curve_length(field, np.array(pts))
