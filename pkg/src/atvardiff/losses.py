"""VAE, adversarial and degradation-regression losses, and their weighted total.

Every squared norm is reduced with a mean so the weights do not depend on
image resolution.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, ShapeError, Tensor

PROB_CLAMP = 1e-7
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
DEFAULT_LAMBDAS = (0.1, 0.1, 0.5)


def reparameterize(mu: Tensor, logvar: Tensor, rng_or_eps) -> Tensor:
    """c = mu + exp(logvar / 2) * eps, with eps drawn from ``rng`` or passed directly."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    if isinstance(rng_or_eps, np.random.Generator):
        eps = rng_or_eps.standard_normal(mu.shape)
    else:
        eps = np.asarray(rng_or_eps)
        if eps.shape != mu.shape:
            raise ShapeError(f"reparameterize: eps {eps.shape} vs mu {mu.shape}")
    std = T.exp(T.scale(T.clip(logvar, LOGVAR_MIN, LOGVAR_MAX), 0.5))
    return mu + T.mul(std, Tensor(eps))


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)), averaged over elements."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_loss: mu {mu.shape} vs logvar {logvar.shape}")
    lv = T.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)
    return T.scale(T.mean(T.square(mu) + T.exp(lv) - lv - 1.0), 0.5)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    return T.mean(T.square(a - b))


def vae_loss(y: Tensor, y_hat: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    return kl_loss(mu, logvar) + mse(T.as_tensor(y), y_hat)


def _clamp_prob(p: Tensor) -> Tensor:
    return T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def adv_gen_loss(p_fake) -> Tensor:
    """-log D(y_hat), averaged over the batch."""
    return T.mean(-T.log(_clamp_prob(T.as_tensor(p_fake))))


def disc_loss(p_real, p_fake) -> Tensor:
    """-log D(y) - log(1 - D(y_hat)), averaged over the batch."""
    p_real, p_fake = T.as_tensor(p_real), T.as_tensor(p_fake)
    real = T.log(_clamp_prob(p_real))
    fake = T.log(1.0 - _clamp_prob(p_fake))
    return -(T.mean(real) + T.mean(fake))


def degrad_loss(phi, phi_hat: Tensor) -> Tensor:
    phi = T.as_tensor(phi)
    if phi.shape != phi_hat.shape:
        raise ShapeError(f"degrad_loss: target {phi.shape} vs estimate {phi_hat.shape}")
    return mse(phi, phi_hat)


def total_loss(l_diff, l_vae, l_adv, l_degrad, lambdas=DEFAULT_LAMBDAS):
    """l_diff + lam1 l_vae + lam2 l_adv + lam3 l_degrad for Tensors or floats."""
    terms = (l_diff, l_vae, l_adv, l_degrad)
    for term in terms:
        value = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss term {value}")
    l1, l2, l3 = lambdas
    if not any(isinstance(term, Tensor) for term in terms):
        return l_diff + l1 * l_vae + l2 * l_adv + l3 * l_degrad
    return T.as_tensor(l_diff) + T.scale(T.as_tensor(l_vae), l1) + T.scale(T.as_tensor(l_adv), l2) + T.scale(T.as_tensor(l_degrad), l3)
