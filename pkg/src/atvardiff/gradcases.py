"""Registered gradient-check cases: every differentiable op, every loss, and the networks.

Each builder draws a small random instance from ``rng`` and returns
``(f, inputs)``. Outputs of non-scalar ops are reduced with a random
weighting so every output coordinate contributes to the check.
"""

from __future__ import annotations

import numpy as np

from . import losses
from . import tensor as T
from .diffusion import diffusion_loss, make_schedule
from .gradcheck import register
from .nn import Decoder, Discriminator, Encoder, ParamHead, PowerIterState, UNet, UNetConfig, power_iteration
from .tensor import Tensor


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from(rng, shape, points, margin=0.1) -> Tensor:
    """Random values at least ``margin`` from each kink in ``points``."""
    x = rng.uniform(-2.0, 2.0, shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-12) * margin * 2
    return Tensor(x, requires_grad=True)


def _shape(rng, ndim=4):
    return tuple(int(s) for s in rng.integers(1, 4, ndim - 2)) + tuple(2 * int(rng.integers(1, 4)) for _ in range(2))


def _unary(name, fn, points=None, lo=-2.0, hi=2.0):
    @register(name)
    def build(rng):
        shape = _shape(rng)
        x = _away_from(rng, shape, points) if points else _leaf(rng, shape, lo, hi)
        with T.no_grad():
            w = rng.standard_normal(fn(x).shape)
        return (lambda a: T.sum(T.mul(fn(a), Tensor(w)))), [x]


_unary("relu", T.relu, points=[0.0])
_unary("leaky_relu", T.leaky_relu, points=[0.0])
_unary("sigmoid", T.sigmoid, lo=-6.0, hi=6.0)
_unary("silu", T.silu, lo=-6.0, hi=6.0)
_unary("exp", T.exp)
_unary("log", T.log, lo=0.2, hi=3.0)
_unary("square", T.square)
_unary("clip", lambda a: T.clip(a, -0.5, 0.7), points=[-0.5, 0.7])
_unary("scale", lambda a: T.scale(a, -1.7))
_unary("shift", lambda a: T.shift(a, 0.3))
_unary("neg", lambda a: -a)
_unary("down2", T.down2)
_unary("up2_nearest", T.up2_nearest)
_unary("mean_spatial", T.mean_spatial)
_unary("reshape", lambda a: T.reshape(a, (-1,)))
_unary("slice_channels", lambda a: T.slice_channels(a, 0, max(1, a.shape[1] - 1)))


def _binary(name, fn):
    @register(name)
    def build(rng):
        shape = _shape(rng)
        a, b = _leaf(rng, shape), _leaf(rng, shape)
        w = rng.standard_normal(shape)
        return (lambda p, q: T.sum(T.mul(fn(p, q), Tensor(w)))), [a, b]


_binary("add", T.add)
_binary("sub", T.sub)
_binary("mul", T.mul)


@register("sum")
def _sum(rng):
    return T.sum, [_leaf(rng, _shape(rng))]


@register("mean")
def _mean(rng):
    x = _leaf(rng, _shape(rng))
    return (lambda a: T.mean(T.square(a))), [x]


@register("concat")
def _concat(rng):
    n, h = int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3))
    a, b = _leaf(rng, (n, 2, h, h)), _leaf(rng, (n, 3, h, h))
    w = rng.standard_normal((n, 5, h, h))
    return (lambda p, q: T.sum(T.mul(T.concat([p, q], axis=1), Tensor(w)))), [a, b]


@register("add_channel_bias")
def _bias(rng):
    shape = _shape(rng)
    x = _leaf(rng, shape)
    b = _leaf(rng, (shape[1],)) if rng.random() < 0.5 else _leaf(rng, shape[:2])
    w = rng.standard_normal(shape)
    return (lambda p, q: T.sum(T.mul(T.add_channel_bias(p, q), Tensor(w)))), [x, b]


@register("linear")
def _linear(rng):
    n, d, o = (int(v) for v in rng.integers(1, 6, 3))
    x, w, b = _leaf(rng, (n, d)), _leaf(rng, (d, o)), _leaf(rng, (o,))
    r = rng.standard_normal((n, o))
    return (lambda p, q, s: T.sum(T.mul(T.linear(p, q, s), Tensor(r)))), [x, w, b]


def _conv_case(rng, n, cin, cout, h, k, stride, padding):
    x, w, b = _leaf(rng, (n, cin, h, h)), _leaf(rng, (cout, cin, k, k)), _leaf(rng, (cout,))
    hout = (h + 2 * padding - k) // stride + 1
    r = rng.standard_normal((n, cout, hout, hout))
    return (lambda p, q, s: T.sum(T.mul(T.conv2d(p, q, s, stride, padding), Tensor(r)))), [x, w, b]


@register("conv2d", tol=1e-4)
def _conv(rng):
    return _conv_case(rng, 2, 3, 4, 8, 3, 1, 1)


@register("conv2d.strided", tol=1e-4)
def _conv_strided(rng):
    return _conv_case(rng, 2, 3, 4, 8, 3, 2, 1)


@register("conv2d.random", tol=1e-4)
def _conv_random(rng):
    k = int(rng.choice([1, 2, 3, 4]))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, k))
    h = int(rng.integers(max(k, 3), 8))
    return _conv_case(rng, int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), h, k, stride, padding)


@register("group_norm")
def _group_norm(rng):
    groups = int(rng.integers(1, 3))
    c = groups * int(rng.integers(1, 4))
    shape = (int(rng.integers(1, 3)), c, 4, 4)
    x, gamma, beta = _leaf(rng, shape), _leaf(rng, (c,), 0.5, 1.5), _leaf(rng, (c,))
    r = rng.standard_normal(shape)
    return (lambda p, q, s: T.sum(T.mul(T.group_norm(p, q, s, groups), Tensor(r)))), [x, gamma, beta]


@register("spectral_divide")
def _spectral(rng):
    w = _leaf(rng, (4, 3, 3, 3))
    state = PowerIterState(rng.standard_normal(4), rng.standard_normal(27))
    state.u /= np.linalg.norm(state.u)
    state.v /= np.linalg.norm(state.v)
    power_iteration(w.data.reshape(4, -1), state, 5)
    r = rng.standard_normal(w.shape)
    return (lambda a: T.sum(T.mul(T.spectral_divide(a, state.u, state.v), Tensor(r)))), [w]


# ---------------------------------------------------------------- losses


@register("reparameterize")
def _reparam(rng):
    shape = _shape(rng)
    mu, logvar = _leaf(rng, shape), _leaf(rng, shape, -2.0, 2.0)
    eps = rng.standard_normal(shape)
    r = rng.standard_normal(shape)
    return (lambda m, lv: T.sum(T.mul(losses.reparameterize(m, lv, eps), Tensor(r)))), [mu, logvar]


@register("kl_loss")
def _kl(rng):
    shape = _shape(rng)
    return losses.kl_loss, [_leaf(rng, shape), _leaf(rng, shape, -3.0, 3.0)]


@register("vae_loss")
def _vae(rng):
    shape = _shape(rng)
    y = Tensor(rng.uniform(-1, 1, shape))
    lat = (shape[0], 2, shape[2] // 2, shape[3] // 2)
    return (lambda yh, m, lv: losses.vae_loss(y, yh, m, lv)), [_leaf(rng, shape), _leaf(rng, lat), _leaf(rng, lat)]


@register("adv_gen_loss")
def _adv(rng):
    logits = _leaf(rng, (int(rng.integers(1, 6)),), -3.0, 3.0)
    return (lambda z: losses.adv_gen_loss(T.sigmoid(z))), [logits]


@register("disc_loss")
def _disc(rng):
    n = int(rng.integers(1, 6))
    real, fake = _leaf(rng, (n,), -3.0, 3.0), _leaf(rng, (n,), -3.0, 3.0)
    return (lambda a, b: losses.disc_loss(T.sigmoid(a), T.sigmoid(b))), [real, fake]


@register("degrad_loss")
def _degrad(rng):
    n = int(rng.integers(1, 5))
    phi = rng.uniform(0, 1, (n, 3))
    return (lambda p: losses.degrad_loss(phi, p)), [_leaf(rng, (n, 3))]


@register("total_loss")
def _total(rng):
    terms = [_leaf(rng, (), 0.1, 2.0) for _ in range(4)]
    lambdas = tuple(rng.uniform(0, 1, 3))
    return (lambda a, b, c, d: losses.total_loss(a, b, c, d, lambdas)), terms


# ---------------------------------------------------------------- networks

# Deep compositions have coordinates with |gradient| ~ 1e-8, where a 1e-6
# step leaves the central difference dominated by roundoff.
NET_EPS = 1e-5
# The U-Net (SiLU, GroupNorm) is smooth and the discriminator input has many
# such coordinates; there the error scales as 1/eps down to 1e-5, so a wider
# step is the more accurate one.
SMOOTH_EPS = 1e-4


def _params(module) -> list[Tensor]:
    ps = module.parameters()
    for p in ps:
        p.requires_grad = True
    return ps


def _generic(module, rng, spread=0.1):
    """Move every parameter off its structured init (near-zero convs, unit norms)."""
    for p in module.parameters():
        p.data = p.data + rng.uniform(-spread, spread, p.shape)
    return module


def _tiny_unet(rng) -> UNet:
    sched = make_schedule(10, 1e-3, 0.2)
    unet = UNet(UNetConfig(base=4, time_dim=8, latent_channels=2, num_steps=10), rng, np.sqrt(1 - sched.alpha_bar))
    return _generic(unet, rng)


@register("diffusion_loss.unet", eps=SMOOTH_EPS)
def _diff_unet(rng):
    """Denoising loss against every U-Net parameter on a 1x3x8x8 input."""
    unet = _tiny_unet(rng)
    sched = make_schedule(10, 1e-3, 0.2)
    x0, y = rng.uniform(-1, 1, (1, 3, 8, 8)), Tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    c, eps = Tensor(rng.standard_normal((1, 2, 4, 4))), rng.standard_normal((1, 3, 8, 8))
    t = rng.integers(1, 11, 1)
    ps = _params(unet)
    return (lambda *_: diffusion_loss(unet, x0, y, c, t, eps, sched)), ps


@register("unet.inputs", eps=SMOOTH_EPS)
def _unet_inputs(rng):
    """mean(output) against x_t, y and c."""
    unet = _tiny_unet(rng)
    x, y, c = _leaf(rng, (1, 3, 8, 8)), _leaf(rng, (1, 3, 8, 8)), _leaf(rng, (1, 2, 4, 4))
    t = rng.integers(1, 11, 1)
    return (lambda a, b, d: T.mean(unet(a, t, b, d))), [x, y, c]


@register("encoder.sum_mu", eps=NET_EPS)
def _enc_mu(rng):
    enc = Encoder(rng, latent_channels=2, widths=(4, 6))
    y = Tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    return (lambda *_: T.sum(enc(y)[0])), _params(enc)


@register("vae_loss.encoder_decoder", eps=NET_EPS)
def _vae_nets(rng):
    enc = Encoder(rng, latent_channels=2, widths=(4, 6))
    dec = Decoder(rng, latent_channels=2, widths=(6, 4))
    y = Tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    eps = rng.standard_normal((1, 2, 4, 4))

    def f(*_):
        mu, logvar = enc(y)
        return losses.vae_loss(y, dec(losses.reparameterize(mu, logvar, eps)), mu, logvar)

    return f, _params(enc) + _params(dec)


@register("degrad_loss.param_head", eps=NET_EPS)
def _head(rng):
    head = ParamHead(rng, latent_channels=2, width=5)
    c = Tensor(rng.standard_normal((2, 2, 4, 4)))
    phi = rng.uniform(0, 1, (2, 3))
    return (lambda *_: losses.degrad_loss(phi, head(c))), _params(head)


def _small_disc(rng) -> Discriminator:
    disc = Discriminator(rng, in_size=32, widths=(3, 4))
    disc.power_step()
    return disc


@register("disc_loss.discriminator", eps=NET_EPS, max_coords=40)
def _disc_nets(rng):
    disc = _small_disc(rng)
    real = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    fake = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    return (lambda *_: losses.disc_loss(disc(real), disc(fake))), _params(disc)


@register("adv_gen_loss.discriminator_input", eps=SMOOTH_EPS)
def _adv_nets(rng):
    disc = _small_disc(rng)
    fake = _leaf(rng, (1, 3, 32, 32))
    return (lambda a: losses.adv_gen_loss(disc(a))), [fake]
