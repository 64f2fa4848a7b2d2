"""Neural eikonal solver for configuration-pair geodesic distances.

The network ``u`` sees the concatenated pair ``[q_s, q_e]``; the distance is

    U(q_s, q_e) = ||q_e - q_s|| * softplus((u(q_s, q_e) + u(q_e, q_s)) / 2)

which is symmetric, non-negative and zero on the diagonal by construction.
Training is self-supervised: the eikonal residual ``(||grad_{q_e} U||_G - 1)^2``
under the eikonal metric ``G`` plus ``lambda`` times the Laplace-Beltrami
value of ``U`` on the configuration manifold.
"""
from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import diff  # enables float64 before jax.numpy is used
from .diff import ACTIVATIONS, ScalarProgram, safe_norm
from .manifold import GeodesicPath, MetricField, Role, curve_length
from .rfm import BacktrackError, descend

import jax  # noqa: E402  (after diff, which configures x64)
import jax.numpy as jnp  # noqa: E402

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "geodesic-fields/mlp-v1"


class TrainingError(RuntimeError):
    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


@dataclass(frozen=True, eq=False)
class Mlp:
    """Fully connected network; ``weights[i]`` has shape ``(fan_in, fan_out)``."""

    layer_sizes: tuple
    weights: tuple
    biases: tuple
    activation: str = "tanh"
    input_scale: float = 1.0 / math.pi
    kind: str = "cspace"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("layer count does not match layer_sizes")
        for W, b, a, c in zip(self.weights, self.biases, sizes[:-1], sizes[1:]):
            if np.shape(W) != (a, c) or np.shape(b) != (c,):
                raise ValueError(f"parameter shapes {np.shape(W)}, {np.shape(b)} do not match layer ({a}, {c})")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if sizes[-1] != 1:
            raise ValueError("output layer must have width 1")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], seed: int = 0, activation: str = "tanh",
             input_scale: float = 1.0 / math.pi, kind: str = "cspace") -> "Mlp":
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for a, c in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = math.sqrt(6.0 / (a + c))
            Ws.append(rng.uniform(-bound, bound, (a, c)))
            bs.append(np.zeros(c))
        return cls(tuple(layer_sizes), tuple(Ws), tuple(bs), activation, input_scale, kind)

    @property
    def params(self):
        return [(jnp.asarray(W), jnp.asarray(b)) for W, b in zip(self.weights, self.biases)]

    def with_params(self, params) -> "Mlp":
        Ws = tuple(np.asarray(W, dtype=np.float64) for W, _ in params)
        bs = tuple(np.asarray(b, dtype=np.float64) for _, b in params)
        return replace(self, weights=Ws, biases=bs)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    # -- checkpoints ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": self.kind,
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "input_scale": self.input_scale,
            "weights": [np.asarray(W, float).ravel().tolist() for W in self.weights],
            "biases": [np.asarray(b, float).tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a network checkpoint (format={d.get('format')!r})")
        sizes = d["layer_sizes"]
        Ws = tuple(np.asarray(w, float).reshape(a, c) for w, a, c in zip(d["weights"], sizes[:-1], sizes[1:]))
        bs = tuple(np.asarray(b, float) for b in d["biases"])
        return cls(tuple(sizes), Ws, bs, d["activation"], float(d["input_scale"]), d.get("kind", "cspace"))

    def save(self, path, extra: Optional[dict] = None):
        from .io import atomic_write_text

        payload = self.to_dict()
        if extra:
            payload["meta"] = extra
        atomic_write_text(path, json.dumps(payload))

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.01
    learning_rate: float = 1e-3
    lr_final: Optional[float] = 1e-4
    epochs: int = 20000
    batch_size: int = 256
    seed: int = 0
    sampler: str = "uniform"
    validation_fraction: float = 0.1
    eval_every: int = 0
    hidden: tuple = (128, 128, 128)
    mcmc_step: float = 0.3
    local_fraction: float = 0.25  # share of pairs drawn with q_e near q_s
    local_scale: float = 0.3  # std of the q_e - q_s offset for those pairs
    dtype: str = "float32"  # precision of the optimizer loop; trained weights are stored as float64

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.sampler not in ("uniform", "rm-mala"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if not 0 <= self.local_fraction <= 1 or not self.local_scale > 0:
            raise ValueError("local_fraction must lie in [0, 1] and local_scale must be positive")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")


@dataclass(frozen=True)
class LossReport:
    epoch: int
    eikonal: float
    divergence: float
    total: float
    validation: Optional[float] = None


# -- traced building blocks ----------------------------------------------------

def mlp_forward(params, x, activation: str = "tanh"):
    act = ACTIVATIONS[activation]
    for W, b in params[:-1]:
        x = act(x @ W + b)
    W, b = params[-1]
    return (x @ W + b)[0]


def canonical_pair(a, b):
    """Order ``(a, b)`` lexicographically.

    XLA may round ``u(a, b) + u(b, a)`` differently from ``u(b, a) + u(a, b)``
    when it fuses or batches the two passes, so both argument orders are
    mapped to the same computation to keep the symmetry bit-exact.
    """
    swap = jnp.zeros((), bool)
    tied = jnp.ones((), bool)
    for k in range(a.shape[-1]):
        swap = swap | (tied & (a[k] > b[k]))
        tied = tied & (a[k] == b[k])
    return jnp.where(swap, b, a), jnp.where(swap, a, b)


@functools.lru_cache(maxsize=None)
def cspace_distance(activation: str, scale: float) -> Callable:
    """``(params, q_s, q_e) -> U`` for a configuration-space model."""

    def u(params, a, b):
        return mlp_forward(params, jnp.concatenate([a, b]) * scale, activation)

    def dist(params, qs, qe):
        a, b = canonical_pair(qs, qe)
        sym = 0.5 * (u(params, a, b) + u(params, b, a))
        return safe_norm(b - a) * jax.nn.softplus(sym)

    return dist


@functools.lru_cache(maxsize=None)
def cspace_symmetric(activation: str, scale: float) -> Callable:
    def sym(params, qs, qe):
        qs, qe = canonical_pair(qs, qe)
        a = mlp_forward(params, jnp.concatenate([qs, qe]) * scale, activation)
        b = mlp_forward(params, jnp.concatenate([qe, qs]) * scale, activation)
        return 0.5 * (a + b)

    return jax.jit(sym)


def _traced_pair(field: MetricField):
    """Traced (eikonal, path) metric functions for a field of either role."""
    eik = field if field.role is Role.EIKONAL else field.dual()
    path = eik.dual()
    if eik.traced is None or path.traced is None:
        raise ValueError(f"metric field {field.name!r} has no traceable evaluator")
    return eik.traced, path.traced


def require_eikonal(field: MetricField) -> MetricField:
    if field.role is not Role.EIKONAL:
        raise ValueError("expected an eikonal-role metric field (the inverse of the path metric)")
    return field


class Kernels:
    """Compiled losses, flows and training step for one (distance, metric) pair."""

    def __init__(self, dist: Callable, eik: Callable, path: Callable):
        self.dist = dist
        grad_q = jax.grad(dist, argnums=2)
        hess_q = jax.jacfwd(grad_q, argnums=2)

        def terms(params, src, q):
            g = grad_q(params, src, q)
            H = hess_q(params, src, q)
            Ginv_path = eik(q)  # inverse components of the path metric
            sq = g @ Ginv_path @ g
            norm = jnp.sqrt(jnp.where(sq > 0, sq, 1.0)) * (sq > 0)
            l_eik = (norm - 1.0) ** 2
            dM = jax.jacfwd(path)(q)  # dM[l, j, k] = d_k M_lj
            first = dM + jnp.transpose(dM, (0, 2, 1)) - jnp.transpose(dM, (2, 0, 1))
            gamma = 0.5 * jnp.einsum("il,ljk->ijk", Ginv_path, first)
            l_div = jnp.sum(Ginv_path * (H - jnp.einsum("kij,k->ij", gamma, g)))
            return l_eik, l_div, norm

        self._terms = terms
        batch = jax.vmap(terms, (None, 0, 0))
        self.batch_terms = jax.jit(batch)

        def loss(params, S, Q, lam):
            e, d, _ = batch(params, S, Q)
            return jnp.mean(e + lam * d), (jnp.mean(e), jnp.mean(d))

        vg = jax.value_and_grad(loss, has_aux=True)

        def step(params, m, v, t, S, Q, lam, lr):
            (total, (me, md)), grads = vg(params, S, Q, lam)
            b1, b2, eps = 0.9, 0.999, 1e-8
            m = jax.tree_util.tree_map(lambda a, g: b1 * a + (1 - b1) * g, m, grads)
            v = jax.tree_util.tree_map(lambda a, g: b2 * a + (1 - b2) * g * g, v, grads)
            c1, c2 = 1 - b1**t, 1 - b2**t
            params = jax.tree_util.tree_map(lambda p, a, b: p - lr * (a / c1) / (jnp.sqrt(b / c2) + eps), params, m, v)
            return params, m, v, total, me, md

        self.step = jax.jit(step)
        self.loss = jax.jit(loss)

        def flow(params, src, q):
            return eik(q) @ grad_q(params, src, q)

        self.flow = jax.jit(flow)
        self.batch_flow = jax.jit(jax.vmap(flow, (None, 0, 0)))
        self.value_and_grad = jax.jit(jax.value_and_grad(dist, argnums=2))
        self.batch_value_and_grad = jax.jit(jax.vmap(jax.value_and_grad(dist, argnums=2), (None, 0, 0)))
        self.batch_value = jax.jit(jax.vmap(dist, (None, 0, 0)))


@functools.lru_cache(maxsize=32)
def _kernels_cached(dist, eik, path) -> Kernels:
    return Kernels(dist, eik, path)


def kernels_for(net: Mlp, field: MetricField, arm=None) -> Kernels:
    eik, path = _traced_pair(field)
    if net.kind == "ik":
        from .nesik import ik_distance

        dist = ik_distance(net.activation, net.input_scale, arm)
    else:
        dist = cspace_distance(net.activation, net.input_scale)
    return _kernels_cached(dist, eik, path)


# -- public operations ---------------------------------------------------------

def symmetric_output(net: Mlp, a, b) -> float:
    fn = cspace_symmetric(net.activation, net.input_scale)
    return float(fn(net.params, jnp.asarray(a, float), jnp.asarray(b, float)))


def distance_program(net: Mlp, q_s) -> ScalarProgram:
    """``q -> U(q_s, q)`` as a differentiable scalar program."""
    dist = cspace_distance(net.activation, net.input_scale)
    return ScalarProgram(_bind_source(dist), (net.params, jnp.asarray(q_s, float)))


@functools.lru_cache(maxsize=None)
def _bind_source(dist):
    def fn(params, q):
        p, src = params
        return dist(p, src, q)

    return fn


def factorized_distance(net: Mlp, q_s, q_e) -> float:
    dist = cspace_distance(net.activation, net.input_scale)
    return float(jax.jit(dist)(net.params, jnp.asarray(q_s, float), jnp.asarray(q_e, float)))


def distance_batch(net: Mlp, QS, QE) -> np.ndarray:
    dist = cspace_distance(net.activation, net.input_scale)
    return np.asarray(_batched_value(dist)(net.params, jnp.asarray(QS, float), jnp.asarray(QE, float)))


@functools.lru_cache(maxsize=None)
def _batched_value(dist):
    return jax.jit(jax.vmap(dist, (None, 0, 0)))


def _pair_terms(net: Mlp, field: MetricField, src, q, arm=None):
    k = kernels_for(net, require_eikonal(field), arm)
    e, d, n = k.batch_terms(net.params, jnp.asarray(src, float)[None], jnp.asarray(q, float)[None])
    return float(e[0]), float(d[0]), float(n[0])


def eikonal_loss(net: Mlp, field: MetricField, q_s, q_e) -> float:
    return _pair_terms(net, field, q_s, q_e)[0]


def divergence_loss(net: Mlp, field: MetricField, q_s, q_e) -> float:
    return _pair_terms(net, field, q_s, q_e)[1]


def gradient_norm(net: Mlp, field: MetricField, q_s, q_e) -> float:
    """``||grad_{q_e} U||`` measured with the eikonal metric."""
    return _pair_terms(net, field, q_s, q_e)[2]


def residuals(net: Mlp, field: MetricField, S, Q, arm=None) -> np.ndarray:
    """Per-pair ``| ||grad U||_G - 1 |`` for a batch."""
    k = kernels_for(net, require_eikonal(field), arm)
    _, _, n = k.batch_terms(net.params, jnp.asarray(S, float), jnp.asarray(Q, float))
    return np.abs(np.asarray(n) - 1.0)


def total_loss(net: Mlp, field: MetricField, pairs, lam: float, arm=None) -> LossReport:
    pairs = np.asarray(pairs, float)
    if len(pairs) == 0:
        raise ValueError("empty batch")
    k = kernels_for(net, require_eikonal(field), arm)
    S, Q = pairs[:, 0], pairs[:, 1]
    total, (me, md) = k.loss(net.params, jnp.asarray(S), jnp.asarray(Q), lam)
    return LossReport(0, float(me), float(md), float(total))


def uniform_pairs(rng: np.random.Generator, n: int, low, high):
    low, high = np.asarray(low, float), np.asarray(high, float)
    return rng.uniform(low, high, (n, len(low))), rng.uniform(low, high, (n, len(low)))


def local_pairs(rng: np.random.Generator, n: int, low, high, fraction: float, scale: float):
    """Uniform pairs where a ``fraction`` of the queries is moved next to its source.

    Uniform pairs rarely land close together, but every backtracked path
    ends in that region, where the factorized form has to bend fastest.
    """
    S, Q = uniform_pairs(rng, n, low, high)
    k = int(round(fraction * n))
    if k:
        near = S[:k] + rng.normal(0.0, scale, (k, S.shape[1]))
        Q[:k] = np.clip(near, low, high)
    return S, Q


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_final is None or config.epochs <= 1:
        return config.learning_rate
    frac = epoch / (config.epochs - 1)
    return config.learning_rate * (config.lr_final / config.learning_rate) ** frac


def fit(net: Mlp, field: MetricField, config: TrainConfig, draw: Callable, arm=None, callback=None):
    """Generic Adam loop; ``draw(rng, n)`` returns ``(sources, queries)``."""
    k = kernels_for(net, require_eikonal(field), arm)
    rng = np.random.default_rng(config.seed)
    n_val = int(math.ceil(config.validation_fraction * config.batch_size))
    val = draw(np.random.default_rng([config.seed, 1]), max(n_val, 1)) if n_val else None
    dt = jnp.dtype(config.dtype)
    params = jax.tree_util.tree_map(lambda a: a.astype(dt), net.params)
    m = jax.tree_util.tree_map(jnp.zeros_like, params)
    v = jax.tree_util.tree_map(jnp.zeros_like, params)
    history = []
    for epoch in range(config.epochs):
        S, Q = draw(rng, config.batch_size)
        params, m, v, total, me, md = k.step(
            params, m, v, float(epoch + 1), jnp.asarray(S, dt), jnp.asarray(Q, dt), config.lam, _lr_at(config, epoch)
        )
        total = float(total)
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss at epoch {epoch}", batch=(np.asarray(S), np.asarray(Q)))
        vres = None
        if val is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            _, _, n = k.batch_terms(params, jnp.asarray(val[0]), jnp.asarray(val[1]))
            vres = float(np.mean(np.abs(np.asarray(n) - 1.0)))
        rep = LossReport(epoch, float(me), float(md), total, vres)
        history.append(rep)
        if callback is not None:
            callback(rep)
    return net.with_params(params) if config.epochs else net, history


def train(net: Mlp, field: MetricField, config: TrainConfig, low=(-math.pi, -math.pi), high=(math.pi, math.pi),
          callback=None):
    """Train a configuration-space model; returns ``(trained_net, history)``."""
    if net.kind != "cspace":
        raise ValueError("use nesik.train_ik for inverse-kinematics models")
    if config.sampler == "rm-mala":
        draw = _mcmc_draw(field, config, low, high)
    else:
        def draw(rng, n):
            return local_pairs(rng, n, low, high, config.local_fraction, config.local_scale)
    return fit(net, field, config, draw, callback=callback)


def _mcmc_draw(field: MetricField, config: TrainConfig, low, high):
    from .sampler import SamplerConfig, run_rmmala, volume_density

    path = field.dual() if field.role is Role.EIKONAL else field
    pool_size = max(10 * config.batch_size, 5000)
    samples = run_rmmala(path, volume_density(path), SamplerConfig(config.mcmc_step, 500, pool_size, config.seed)).samples

    def draw(rng, n):
        i = rng.integers(0, len(samples), n)
        j = rng.integers(0, len(samples), n)
        return samples[i], samples[j]

    return draw


def backtrack_neural(net: Mlp, field: MetricField, q_s, q_e, step: float = 0.01, tol: float = 0.05,
                     low=(-math.pi, -math.pi), high=(math.pi, math.pi)) -> GeodesicPath:
    """Descend ``U(q_s, .)`` from ``q_e`` along ``-G_eik grad U`` with fixed Euclidean steps."""
    field = require_eikonal(field)
    k = kernels_for(net, field)
    q_s = np.asarray(q_s, float)
    q_e = np.asarray(q_e, float)
    params = net.params
    src = jnp.asarray(q_s)
    lo, hi = np.asarray(low, float), np.asarray(high, float)
    budget = 10 * np.linalg.norm(q_e - q_s) / step

    def flow(q):
        return np.asarray(k.flow(params, src, jnp.asarray(q)))

    pts, status = descend(flow, q_e, q_s, step, tol, budget, clamp=lambda q: np.clip(q, lo, hi))
    if status == "ok" and np.linalg.norm(pts[-1] - q_s) > 0:
        pts = np.vstack([pts, q_s])
    path = curve_length(field.dual(), pts, status)
    if status != "ok":
        raise BacktrackError(f"neural backtracking ended with {status}", path, status)
    return path


def backtrack_neural_batch(net: Mlp, field: MetricField, QS, QE, step: float = 0.01, tol: float = 0.05,
                           low=(-math.pi, -math.pi), high=(math.pi, math.pi)):
    """Batched :func:`backtrack_neural`; failed queries come back with their status."""
    field = require_eikonal(field)
    k = kernels_for(net, field)
    QS, QE = np.asarray(QS, float), np.asarray(QE, float)
    budget = 10 * np.linalg.norm(QE - QS, axis=1) / step
    pts, status = _batched_to_targets(k, net.params, QS, QE, step, tol, budget, low, high)
    path_field = field.dual()
    out = []
    for p, s, q_s in zip(pts, status, QS):
        if s == "ok" and np.linalg.norm(p[-1] - q_s) > 0:
            p = np.vstack([p, q_s])
        out.append(curve_length(path_field, p, s))
    return out


def _batched_to_targets(k, params, QS, QE, step, tol, budget, low, high, window=100):
    S = jnp.asarray(QS)
    Q = QE.copy()
    n = len(Q)
    paths = [[Q[i].copy()] for i in range(n)]
    status = np.array(["ok" if np.linalg.norm(QE[i] - QS[i]) < tol else "run" for i in range(n)], dtype=object)
    budgets = np.ceil(np.broadcast_to(budget, (n,))).astype(int)
    lo, hi = np.asarray(low, float), np.asarray(high, float)
    it = 0
    while np.any(status == "run"):
        active = np.flatnonzero(status == "run")
        V = np.asarray(k.batch_flow(params, S[active], jnp.asarray(Q[active])))
        nv = np.linalg.norm(V, axis=1)
        bad = ~np.isfinite(nv) | (nv == 0)
        status[active[bad]] = "stagnation"
        good = active[~bad]
        Q[good] = np.clip(Q[good] - step * V[~bad] / nv[~bad, None], lo, hi)
        it += 1
        hit = np.linalg.norm(Q[good] - QS[good], axis=1) < tol
        for i, h in zip(good, hit):
            paths[i].append(Q[i].copy())
            if h:
                status[i] = "ok"
            elif len(paths[i]) > window and np.linalg.norm(paths[i][-1] - paths[i][-1 - window]) < 1e-9 * step:
                status[i] = "stagnation"
            elif it >= budgets[i]:
                status[i] = "budget"
    return [np.array(p) for p in paths], list(status)
