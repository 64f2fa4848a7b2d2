"""Neural eikonal solver from a task-space target to joint configurations.

The distance is factorized through forward kinematics,

    U(x_s, q_e) = ||f(q_e) - x_s|| * softplus(u([x_s, q_e]))

so it vanishes exactly on the inverse-kinematics solution set of ``x_s``.
There is no symmetrization: source and query live in different spaces.
Also contains the damped Gauss-Newton IK baseline.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diff  # noqa: F401  (float64 setup)
from .diff import safe_norm
from .manifold import GeodesicPath, MetricField, curve_length
from .nes import Mlp, TrainConfig, fit, kernels_for, mlp_forward, require_eikonal
from .rfm import BacktrackError, descend
from .robots import PlanarArm, forward_kinematics, jacobian

import jax  # noqa: E402
import jax.numpy as jnp  # noqa: E402

log = logging.getLogger(__name__)

TARGET_MARGIN = 0.1
PINV_DAMPING = 1e-6


@dataclass(frozen=True)
class IkProblem:
    arm: PlanarArm
    target: tuple
    metric: MetricField  # eikonal role

    def __post_init__(self):
        x = np.asarray(self.target, float)
        if x.shape != (2,):
            raise ValueError("planar target must have two coordinates")
        object.__setattr__(self, "target", tuple(float(v) for v in x))
        r = float(np.linalg.norm(x))
        lo, hi = self.arm.reach
        if not lo <= r <= hi:
            raise ValueError(f"target {x.tolist()} at radius {r:.4g} is outside the reachable annulus [{lo}, {hi}]")
        require_eikonal(self.metric)

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.target)


def _fk_traced(arm: PlanarArm, q):
    q1, q12 = q[0], q[0] + q[1]
    return jnp.stack([arm.l1 * jnp.cos(q1) + arm.l2 * jnp.cos(q12), arm.l1 * jnp.sin(q1) + arm.l2 * jnp.sin(q12)])


@functools.lru_cache(maxsize=None)
def ik_distance(activation: str, scale: float, arm: PlanarArm):
    """``(params, x_s, q_e) -> U`` for a task-space model."""

    def dist(params, xs, qe):
        u = mlp_forward(params, jnp.concatenate([xs, qe]) * scale, activation)
        return safe_norm(_fk_traced(arm, qe) - xs) * jax.nn.softplus(u)

    return dist


def _check(net: Mlp):
    if net.kind != "ik":
        raise ValueError("expected an inverse-kinematics model (kind='ik')")


def init_ik(hidden=(128, 128, 128), seed: int = 0, activation: str = "tanh", input_scale: float = 1.0 / math.pi) -> Mlp:
    return Mlp.init([4, *hidden, 1], seed, activation, input_scale, kind="ik")


def factorized_ik_distance(net: Mlp, prob: IkProblem, q_e) -> float:
    _check(net)
    dist = ik_distance(net.activation, net.input_scale, prob.arm)
    return float(jax.jit(dist)(net.params, jnp.asarray(prob.x), jnp.asarray(q_e, float)))


def ik_distance_batch(net: Mlp, arm: PlanarArm, XS, QE) -> np.ndarray:
    _check(net)
    k = kernels_for(net, _any_eikonal(), arm)
    return np.asarray(k.batch_value(net.params, jnp.asarray(XS, float), jnp.asarray(QE, float)))


def _any_eikonal():
    from .robots import euclidean_metric_fields

    return euclidean_metric_fields(2)[1]


def _terms(net: Mlp, prob: IkProblem, q_e):
    _check(net)
    k = kernels_for(net, prob.metric, prob.arm)
    e, d, n = k.batch_terms(net.params, jnp.asarray(prob.x)[None], jnp.asarray(q_e, float)[None])
    return float(e[0]), float(d[0]), float(n[0])


def ik_eikonal_loss(net: Mlp, prob: IkProblem, q_e) -> float:
    return _terms(net, prob, q_e)[0]


def ik_divergence_loss(net: Mlp, prob: IkProblem, q_e) -> float:
    return _terms(net, prob, q_e)[1]


def ik_gradient(net: Mlp, prob: IkProblem, q_e) -> np.ndarray:
    _check(net)
    k = kernels_for(net, prob.metric, prob.arm)
    _, g = k.value_and_grad(net.params, jnp.asarray(prob.x), jnp.asarray(q_e, float))
    return np.asarray(g)


def ik_residuals(net: Mlp, arm: PlanarArm, field: MetricField, XS, QE) -> np.ndarray:
    _check(net)
    k = kernels_for(net, require_eikonal(field), arm)
    _, _, n = k.batch_terms(net.params, jnp.asarray(XS, float), jnp.asarray(QE, float))
    return np.abs(np.asarray(n) - 1.0)


def sample_targets(rng: np.random.Generator, arm: PlanarArm, n: int, margin: float = TARGET_MARGIN) -> np.ndarray:
    """Targets ``f(q)`` for uniform ``q``, rejected unless inside the annulus shrunk by ``margin``."""
    lo, hi = arm.reach
    low, high = arm.box
    out = np.empty((0, 2))
    while len(out) < n:
        x = forward_kinematics(arm, rng.uniform(low, high, (2 * (n - len(out)) + 8, 2)))
        r = np.linalg.norm(x, axis=1)
        out = np.vstack([out, x[(r >= lo + margin) & (r <= hi - margin)]])
    return out[:n]


def train_ik(net: Mlp, arm: PlanarArm, field: MetricField, config: TrainConfig, callback=None):
    """Self-supervised training on ``(x_s, q_e)`` pairs; returns ``(trained_net, history)``."""
    _check(net)
    low, high = arm.box

    def draw(rng, n):
        return sample_targets(rng, arm, n), rng.uniform(low, high, (n, 2))

    return fit(net, field, config, draw, arm=arm, callback=callback)


def backtrack_ik(net: Mlp, prob: IkProblem, q0, step: float = 0.01, tol: float = 0.05,
                 wrap: bool = True) -> GeodesicPath:
    """Descend ``U(x_s, .)`` from ``q0`` until the tip is within ``tol`` of the target.

    The kinematic factor is 2 pi periodic in every joint, so the field also
    vanishes on periodic images of the IK solutions just outside the joint
    box.  With ``wrap`` (default) the descent runs on continuous joint angles,
    the network sees them wrapped into ``(-pi, pi]``, lengths are measured on
    the continuous curve and the returned points are wrapped.  Without it the
    iterate is clamped to the box, which can pin it against a joint limit.
    """
    from .sampler import wrap_angles

    _check(net)
    k = kernels_for(net, prob.metric, prob.arm)
    params, xs = net.params, jnp.asarray(prob.x)
    low, high = prob.arm.box
    q0 = np.asarray(q0, float)
    x = prob.x

    def reached(q):
        return float(np.linalg.norm(forward_kinematics(prob.arm, q) - x)) < tol

    def flow(q):
        qq = wrap_angles(q) if wrap else q
        return np.asarray(k.flow(params, xs, jnp.asarray(qq)))

    budget = 10 * max(float(np.linalg.norm(forward_kinematics(prob.arm, q0) - x)), 1.0) / step
    clamp = None if wrap else (lambda q: np.clip(q, low, high))
    pts, status = descend(flow, q0, None, step, tol, budget, reached=reached, clamp=clamp)
    path = curve_length(prob.metric.dual(), pts, status)
    if wrap:
        path = GeodesicPath(wrap_angles(path.points), path.segment_lengths, path.total_length, status)
    if status != "ok":
        raise BacktrackError(f"IK backtracking ended with {status}", path, status)
    return path


def damped_pinv(J, damping: float = PINV_DAMPING) -> np.ndarray:
    J = np.asarray(J, float)
    return J.T @ np.linalg.inv(J @ J.T + damping * np.eye(J.shape[0]))


def gauss_newton_ik(arm: PlanarArm, x_s, q0, step_scale: float = 0.05, max_iters: int = 5000, tol: float = 1e-6,
                    path_field: MetricField = None) -> GeodesicPath:
    """``q <- q + step_scale * J^+ (x_s - f(q))``; the path is the sequence of iterates.

    Status is "ok" on convergence, "max_iters" when the budget runs out, and
    "stall" when the Jacobian is numerically singular and the error stops
    decreasing.
    """
    if not 0 < step_scale <= 1:
        raise ValueError("step_scale must lie in (0, 1]")
    x_s = np.asarray(x_s, float)
    q = np.asarray(q0, float).copy()
    pts = [q.copy()]
    err = float(np.linalg.norm(x_s - forward_kinematics(arm, q)))
    status = "ok"
    it = 0
    while err >= tol:
        if it >= max_iters:
            status = "max_iters"
            break
        J = jacobian(arm, q)
        q = q + step_scale * damped_pinv(J) @ (x_s - forward_kinematics(arm, q))
        new_err = float(np.linalg.norm(x_s - forward_kinematics(arm, q)))
        pts.append(q.copy())
        it += 1
        if abs(np.linalg.det(J)) < 1e-9 and new_err >= err:
            status = "stall"
            log.warning("Gauss-Newton stalled near a singular Jacobian at q=%s", q.tolist())
            break
        err = new_err
    if path_field is None:
        from .robots import kinetic_metric_fields

        path_field = kinetic_metric_fields(arm)[0]
    return curve_length(path_field, np.array(pts), status)
