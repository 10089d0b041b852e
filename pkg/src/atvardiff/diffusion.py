"""DDPM noise schedule, forward process, noise-prediction loss and ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step t = 1..T at position t - 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"step out of range [1, {self.T}]")
        return t


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def _per_sample(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    v = values[np.atleast_1d(t) - 1]
    return v.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is an int or one step per sample.

    Works on ndarrays or Tensors (differentiable in x0 and eps).
    """
    t = sched.check_step(t)
    if np.shape(x0) != np.shape(eps):
        raise ShapeError(f"q_sample: x0 {np.shape(x0)} and eps {np.shape(eps)} differ")
    if not isinstance(x0, Tensor):
        x0 = np.asarray(x0)
        if t.ndim == 0:
            ab = sched.alpha_bar[t - 1]
        else:
            ab = _per_sample(sched.alpha_bar, t, x0.ndim)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)
    eps = T.as_tensor(eps)
    ab = np.broadcast_to(_per_sample(sched.alpha_bar, t, x0.ndim), x0.shape)
    a = Tensor(np.sqrt(ab))
    b = Tensor(np.sqrt(1.0 - ab))
    return T.mul(a, x0) + T.mul(b, eps)


def diffusion_loss(model: Callable, x0, y, c, t, eps, sched: NoiseSchedule) -> Tensor:
    """Mean squared error between ``eps`` and model(q_sample(x0, t, eps), t, y, c)."""
    eps = T.as_tensor(eps)
    x_t = q_sample(T.as_tensor(x0), t, eps, sched)
    pred = model(x_t, t, y, c)
    if pred.shape != eps.shape:
        raise ShapeError(f"diffusion_loss: prediction {pred.shape} vs noise {eps.shape}")
    return T.mean(T.square(pred - eps))


def ddpm_sample(
    model: Callable,
    y,
    c,
    sched: NoiseSchedule,
    rng: np.random.Generator | Sequence[np.random.Generator],
) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0, clipped to [-1, 1].

    ``rng`` is one generator for the batch, or one per sample so that each
    image's noise stream does not depend on batch composition.
    """
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    shape = y_arr.shape
    dtype = T.get_dtype()

    def normal() -> np.ndarray:
        if isinstance(rng, np.random.Generator):
            return rng.standard_normal(shape)
        if len(rng) != shape[0]:
            raise ValueError("need one generator per sample")
        return np.stack([g.standard_normal(shape[1:]) for g in rng])

    y_t, c_t = Tensor(y_arr), T.as_tensor(c)
    x = normal().astype(dtype)
    with T.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = model(Tensor(x), np.full(shape[0], t), y_t, c_t).data
            coef = sched.beta[t - 1] / np.sqrt(1.0 - sched.alpha_bar[t - 1])
            x = (x - coef * eps_hat) / np.sqrt(sched.alpha[t - 1])
            if t > 1:
                x = x + np.sqrt(sched.beta[t - 1]) * normal()
            x = x.astype(dtype)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"sampler produced non-finite values at step {t}")
    return np.clip(x, -1.0, 1.0)
