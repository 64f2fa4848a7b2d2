"""Planar two-link arm with point masses at the elbow and the tip."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .manifold import MetricError, MetricField, Role, inverse_field

PROBE = 101


@dataclass(frozen=True)
class PlanarArm:
    l1: float = 2.0
    l2: float = 2.0
    m1: float = 1.0
    m2: float = 1.0
    joint_low: tuple = (-np.pi, -np.pi)
    joint_high: tuple = (np.pi, np.pi)

    def __post_init__(self):
        if min(self.l1, self.l2, self.m1, self.m2) <= 0:
            raise ValueError("link lengths and masses must be positive")

    @property
    def box(self):
        return np.asarray(self.joint_low, float), np.asarray(self.joint_high, float)

    @property
    def reach(self):
        return abs(self.l1 - self.l2), self.l1 + self.l2


def _q(q):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 2:
        raise ValueError(f"planar arm expects 2 joint angles, got shape {q.shape}")
    return q


def _mass(arm: PlanarArm, q, xp):
    c = xp.cos(q[..., 1])
    a = (arm.m1 + arm.m2) * arm.l1**2 + arm.m2 * arm.l2**2 + 2 * arm.m2 * arm.l1 * arm.l2 * c
    b = arm.m2 * arm.l2**2 + arm.m2 * arm.l1 * arm.l2 * c
    d = arm.m2 * arm.l2**2 + 0 * c
    return xp.stack([xp.stack([a, b], -1), xp.stack([b, d], -1)], -2)


def _mass_dq2(arm: PlanarArm, q, xp):
    s = xp.sin(q[..., 1])
    a = -2 * arm.m2 * arm.l1 * arm.l2 * s
    b = -arm.m2 * arm.l1 * arm.l2 * s
    z = 0 * s
    return xp.stack([xp.stack([a, b], -1), xp.stack([b, z], -1)], -2)


def _potential(arm: PlanarArm, q, xp):
    q1, q2 = q[..., 0], q[..., 1]
    return arm.m1 * arm.l1 * xp.sin(q1) + arm.m2 * (arm.l1 * xp.sin(q1) + arm.l2 * xp.sin(q1 + q2))


def _potential_grad(arm: PlanarArm, q, xp):
    q1, q2 = q[..., 0], q[..., 1]
    c12 = arm.m2 * arm.l2 * xp.cos(q1 + q2)
    return xp.stack([(arm.m1 + arm.m2) * arm.l1 * xp.cos(q1) + c12, c12], -1)


def mass_matrix(arm: PlanarArm, q) -> np.ndarray:
    return _mass(arm, _q(q), np)


def potential_energy(arm: PlanarArm, q):
    P = _potential(arm, _q(q), np)
    return float(P) if np.ndim(P) == 0 else P


def forward_kinematics(arm: PlanarArm, q) -> np.ndarray:
    q = _q(q)
    q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
    return np.stack([arm.l1 * np.cos(q1) + arm.l2 * np.cos(q12), arm.l1 * np.sin(q1) + arm.l2 * np.sin(q12)], -1)


def jacobian(arm: PlanarArm, q) -> np.ndarray:
    q = _q(q)
    q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
    s1, c1, s12, c12 = np.sin(q1), np.cos(q1), np.sin(q12), np.cos(q12)
    row0 = np.stack([-arm.l1 * s1 - arm.l2 * s12, -arm.l2 * s12], -1)
    row1 = np.stack([arm.l1 * c1 + arm.l2 * c12, arm.l2 * c12], -1)
    return np.stack([row0, row1], -2)


def _dM(arm: PlanarArm, q):
    q = np.asarray(q, dtype=float)
    d2 = _mass_dq2(arm, q, np)
    return np.stack([np.zeros_like(d2), d2], axis=-3)


def kinetic_metric_fields(arm: PlanarArm):
    """Path metric ``M(q)`` and its eikonal counterpart ``M(q)^-1``."""
    import jax.numpy as jnp

    path = MetricField(
        lambda q: _mass(arm, _q(q), np),
        Role.PATH,
        lambda q: _dM(arm, q),
        lambda q: _mass(arm, q, jnp),
        2,
        "kinetic",
    )
    return path, inverse_field(path)


def probe_grid(arm: PlanarArm, n: int = PROBE) -> np.ndarray:
    lo, hi = arm.box
    g1, g2 = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n), indexing="ij")
    return np.stack([g1, g2], -1).reshape(-1, 2)


def jacobi_metric_field(arm: PlanarArm, E: float) -> MetricField:
    """``M(q) / (2 (E - P(q)))``; requires ``E`` above the potential on the whole box."""
    import jax.numpy as jnp

    probe = probe_grid(arm)
    P = _potential(arm, probe, np)
    worst = int(np.argmax(P))
    if E <= P[worst]:
        raise MetricError(f"total energy {E} does not exceed potential {P[worst]:.6g} at q={probe[worst].tolist()}")

    def ev(q):
        q = _q(q)
        return _mass(arm, q, np) / (2 * (E - _potential(arm, q, np)))[..., None, None]

    def der(q):
        q = _q(q)
        k = E - _potential(arm, q, np)
        M = _mass(arm, q, np)
        dP = _potential_grad(arm, q, np)
        # d/dq [M / (2k)] = dM / (2k) + M dP / (2k^2)
        out = _dM(arm, q) / (2 * k)[..., None, None, None]
        out = out + M[..., None, :, :] * (dP / (2 * k[..., None] ** 2))[..., :, None, None]
        return out

    def traced(q):
        return _mass(arm, q, jnp) / (2 * (E - _potential(arm, q, jnp)))

    return MetricField(ev, Role.PATH, der, traced, 2, f"jacobi(E={E:g})")


def jacobi_metric_fields(arm: PlanarArm, E: float):
    path = jacobi_metric_field(arm, E)
    return path, inverse_field(path)


def euclidean_metric_fields(dim: int = 2):
    path = MetricField.constant(np.eye(dim), Role.PATH, "euclidean")
    return path, inverse_field(path)


def metric_fields(arm: PlanarArm, kind: str, energy: float = 8.0):
    """``(path, eikonal)`` pair for ``kind`` in {euclidean, kinetic, jacobi}."""
    if kind == "euclidean":
        return euclidean_metric_fields(2)
    if kind == "kinetic":
        return kinetic_metric_fields(arm)
    if kind == "jacobi":
        return jacobi_metric_fields(arm, energy)
    raise ValueError(f"unknown metric {kind!r}")
