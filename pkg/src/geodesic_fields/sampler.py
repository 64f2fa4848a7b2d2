"""Riemannian-manifold MALA (simplified manifold Langevin proposal + Metropolis correction).

The chain targets a density ``rho`` with respect to Lebesgue measure on the
joint box; by default ``rho = sqrt(|G|)``, i.e. uniform with respect to the
Riemannian volume.  Angles are wrapped into ``(-pi, pi]`` after every proposal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .manifold import FD_STEP, MetricError, MetricField


class SamplerTuningError(RuntimeError):
    """No proposal accepted over a long window; the step size is almost surely too large."""


@dataclass(frozen=True)
class SamplerConfig:
    step: float = 0.3
    n_burn: int = 1000
    n_sample: int = 10000
    seed: int = 0
    accepted_only: bool = False  # keep only accepted proposals instead of the chain state
    stall_window: int = 1000
    periodic: bool = True  # measure proposal displacements modulo 2 pi

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step size must be positive")
        if self.n_burn < 0 or self.n_sample < 0:
            raise ValueError("sample counts must be non-negative")


@dataclass(frozen=True)
class DensitySpec:
    """Log target ``L(q) = log rho(q)`` with an optional analytic gradient."""

    log_density: Callable[[np.ndarray], float]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __call__(self, q) -> float:
        return float(self.log_density(np.asarray(q, float)))

    def grad(self, q, h: float = FD_STEP) -> np.ndarray:
        q = np.asarray(q, float)
        if self.gradient is not None:
            return np.asarray(self.gradient(q), float)
        out = np.empty_like(q)
        for i in range(q.size):
            e = np.zeros_like(q)
            e[i] = h
            out[i] = (self(q + e) - self(q - e)) / (2 * h)
        return out


@dataclass(frozen=True)
class SampleSet:
    samples: np.ndarray
    acceptance_rate: float
    n_accepted: int
    n_steps: int
    config: SamplerConfig


def _metric(field: MetricField, q):
    G = field.metric(q)
    try:
        return G, np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"singular metric at {q}") from exc


def _sqrt_det(field: MetricField, q) -> float:
    return math.sqrt(np.linalg.det(field.metric(q)))


def volume_density(field: MetricField) -> DensitySpec:
    """``L(q) = log sqrt|G(q)|``, the Riemannian volume density."""

    def L(q):
        return 0.5 * np.linalg.slogdet(field.metric(q))[1]

    def grad(q):
        G, Gi = _metric(field, q)
        return 0.5 * np.einsum("ab,kba->k", Gi, field.jacobian(q))

    return DensitySpec(L, grad, f"volume({field.name})")


def natural_gradient(field: MetricField, q) -> np.ndarray:
    """``G^-1 grad sqrt|G|`` at ``q``."""
    q = np.asarray(q, float)
    G, Gi = _metric(field, q)
    if field.derivative is not None:
        dG = field.jacobian(q)
        g = 0.5 * math.sqrt(np.linalg.det(G)) * np.einsum("ab,kba->k", Gi, dG)
    else:
        g = np.empty_like(q)
        for k in range(q.size):
            e = np.zeros_like(q)
            e[k] = FD_STEP
            g[k] = (_sqrt_det(field, q + e) - _sqrt_det(field, q - e)) / (2 * FD_STEP)
    return Gi @ g


def _mean(q, Gi, dG, grad_L, eps):
    drift = 0.5 * eps**2 * (Gi @ grad_L)
    # sum_j (G^-1 dG_j G^-1)_ij  and  sum_j G^-1_ij tr(G^-1 dG_j)
    a = np.einsum("ia,jab,bj->i", Gi, dG, Gi)
    b = Gi @ np.einsum("ab,jba->j", Gi, dG)
    return q + drift - eps**2 * a + 0.5 * eps**2 * b


def proposal_mean(field: MetricField, density: DensitySpec, q, eps: float) -> np.ndarray:
    q = np.asarray(q, float)
    _, Gi = _metric(field, q)
    return _mean(q, Gi, field.jacobian(q), density.grad(q), eps)


def _sym_sqrt(A):
    w, V = np.linalg.eigh(A)
    return (V * np.sqrt(w)) @ V.T


def propose(field: MetricField, density: DensitySpec, q, eps: float, z) -> np.ndarray:
    """``mu(q) + eps * S z`` with ``S`` the symmetric square root of ``G(q)^-1``."""
    q = np.asarray(q, float)
    _, Gi = _metric(field, q)
    mu = _mean(q, Gi, field.jacobian(q), density.grad(q), eps)
    return mu + eps * (_sym_sqrt(Gi) @ np.asarray(z, float))


def _gauss_logpdf(x, mu, G, eps, periodic=False):
    # covariance eps^2 G^-1, precision G / eps^2
    d = len(x)
    r = x - mu
    if periodic:
        r = r - 2 * np.pi * np.round(r / (2 * np.pi))
    logdet_cov = 2 * d * math.log(eps) - np.linalg.slogdet(G)[1]
    return -0.5 * d * math.log(2 * math.pi) - 0.5 * logdet_cov - 0.5 * float(r @ G @ r) / eps**2


def transition_logpdf(field: MetricField, density: DensitySpec, frm, to, eps: float, periodic: bool = False) -> float:
    """Gaussian log density of ``to`` given ``frm``.

    With ``periodic`` the displacement from the mean is taken modulo ``2 pi``
    (nearest image), which is what the wrapped chain needs for detailed balance.
    """
    frm = np.asarray(frm, float)
    G, Gi = _metric(field, frm)
    mu = _mean(frm, Gi, field.jacobian(frm), density.grad(frm), eps)
    return _gauss_logpdf(np.asarray(to, float), mu, G, eps, periodic)


def acceptance_log_ratio(field: MetricField, density: DensitySpec, q, q_new, eps: float, periodic: bool = False) -> float:
    fwd = density(q) + transition_logpdf(field, density, q, q_new, eps, periodic)
    bwd = density(q_new) + transition_logpdf(field, density, q_new, q, eps, periodic)
    return bwd - fwd


def wrap_angles(q):
    """Map each coordinate into ``(-pi, pi]``."""
    q = np.asarray(q, float)
    w = np.arctan2(np.sin(q), np.cos(q))
    # sin(-3 pi) rounds to a tiny negative number, landing just above -pi
    return np.where(np.isclose(w, -np.pi, rtol=0, atol=1e-12), np.pi, w)


def _in_range(q) -> bool:
    return bool(np.all((q > -np.pi) & (q <= np.pi)))


class _State:
    """Cached per-point quantities so each step evaluates the metric once."""

    __slots__ = ("q", "G", "L", "mu")

    def __init__(self, field, density, q, eps):
        self.q = q
        self.G, Gi = _metric(field, q)
        self.L = density(q)
        self.mu = _mean(q, Gi, field.jacobian(q), density.grad(q), eps)


def run_rmmala(field: MetricField, density: DensitySpec, config: SamplerConfig, q0=None) -> SampleSet:
    rng = np.random.default_rng(config.seed)
    eps = config.step
    d = field.dim
    q = wrap_angles(rng.uniform(-np.pi, np.pi, d) if q0 is None else np.asarray(q0, float))
    cur = _State(field, density, q, eps)
    cur_S = _sym_sqrt(np.linalg.inv(cur.G))
    out = []
    n_acc = n_acc_post = 0
    since_accept = 0
    total = config.n_burn + config.n_sample
    for i in range(total):
        z = rng.standard_normal(d)
        q_new = cur.mu + eps * (cur_S @ z)
        if not _in_range(q_new):
            q_new = wrap_angles(q_new)
        new = _State(field, density, q_new, eps)
        fwd = cur.L + _gauss_logpdf(new.q, cur.mu, cur.G, eps, config.periodic)
        bwd = new.L + _gauss_logpdf(cur.q, new.mu, new.G, eps, config.periodic)
        alpha = bwd - fwd
        t = rng.random()
        accept = alpha >= 0 or math.exp(alpha) >= t
        if accept:
            cur = new
            cur_S = _sym_sqrt(np.linalg.inv(cur.G))
            n_acc += 1
            since_accept = 0
        else:
            since_accept += 1
            if since_accept >= config.stall_window:
                raise SamplerTuningError(
                    f"no proposal accepted in {config.stall_window} consecutive steps (step size {eps})"
                )
        if i >= config.n_burn:
            n_acc_post += accept
            if accept or not config.accepted_only:
                out.append(cur.q.copy())
    samples = np.array(out).reshape(-1, d)
    rate = n_acc_post / config.n_sample if config.n_sample else (n_acc / total if total else 0.0)
    return SampleSet(samples, float(rate), int(n_acc_post), total, config)


def export_samples(path, result: SampleSet, command: str = "sample"):
    from .io import fmt, write_csv

    d = result.samples.shape[1]
    cols = [f"q{i + 1}" for i in range(d)]
    summary = [f"acceptance_rate={fmt(result.acceptance_rate)} accepted={result.n_accepted} steps={result.n_steps}"]
    return write_csv(path, cols, result.samples, command, result.config.seed, summary)
