"""Exact derivatives of scalar programs with respect to inputs and parameters.

A :class:`ScalarProgram` pairs a JAX-traceable ``fn(params, x) -> scalar``
with a parameter pytree.  Input gradients and parameter gradients use
reverse accumulation; input Hessians differentiate the reverse-mode gradient
once more in forward mode (one tangent sweep per input coordinate).
All arithmetic runs in float64.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Any, Callable

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
from jax.flatten_util import ravel_pytree  # noqa: E402


def safe_norm(v):
    """Euclidean norm whose derivative at the origin is 0 rather than NaN."""
    sq = jnp.sum(v * v)
    nonzero = sq > 0
    return jnp.where(nonzero, jnp.sqrt(jnp.where(nonzero, sq, 1.0)), 0.0)


ACTIVATIONS = {
    "tanh": jnp.tanh,
    "softplus": jax.nn.softplus,
    "sin": jnp.sin,
}


@functools.lru_cache(maxsize=None)
def _compiled(fn: Callable):
    value = jax.jit(fn)
    grad_x = jax.jit(jax.grad(fn, argnums=1))
    grad_p = jax.jit(jax.grad(fn, argnums=0))
    hess_x = jax.jit(jax.jacfwd(jax.grad(fn, argnums=1), argnums=1))
    return value, grad_x, grad_p, hess_x


@dataclass(frozen=True, eq=False)
class ScalarProgram:
    fn: Callable[[Any, Any], Any]
    params: Any = ()

    def __call__(self, x) -> float:
        return float(_compiled(self.fn)[0](self.params, jnp.asarray(x, dtype=jnp.float64)))

    def gradient(self, x) -> np.ndarray:
        return grad_input(self, x)

    def hessian(self, x) -> np.ndarray:
        return hessian_input(self, x)


def grad_input(prog: ScalarProgram, x) -> np.ndarray:
    g = _compiled(prog.fn)[1](prog.params, jnp.asarray(x, dtype=jnp.float64))
    return np.asarray(g)


def grad_params(prog: ScalarProgram, x) -> np.ndarray:
    """Parameter gradient flattened in ``ravel_pytree`` order."""
    g = _compiled(prog.fn)[2](prog.params, jnp.asarray(x, dtype=jnp.float64))
    return np.asarray(ravel_pytree(g)[0])


def hessian_input(prog: ScalarProgram, x) -> np.ndarray:
    return np.asarray(_compiled(prog.fn)[3](prog.params, jnp.asarray(x, dtype=jnp.float64)))


def flatten(params) -> np.ndarray:
    return np.asarray(ravel_pytree(params)[0])


def unflatten_like(params, flat):
    return ravel_pytree(params)[1](jnp.asarray(flat))
