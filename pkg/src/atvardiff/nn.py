"""Networks: conditional U-Net, VAE encoder/decoder, parameter head, discriminator."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.2


class Module:
    """Parameter container; children and parameters are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")
        yield from ((prefix + k, v) for k, v in self._buffers().items())

    def _buffers(self) -> dict[str, np.ndarray]:
        return {}

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None,
                 zero: bool = False, init_scale: float = 1.0):
        bound = init_scale / math.sqrt(cin * k * k)
        self.weight = _uniform(rng, bound, (cout, cin, k, k))
        self.bias = _uniform(rng, bound, (cout,))
        if zero:
            self.weight.data[...] = 0
            self.bias.data[...] = 0
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(din)
        self.weight = _uniform(rng, bound, (din, dout))
        self.bias = _uniform(rng, bound, (dout,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------- spectral normalization

@dataclass
class PowerIterState:
    u: np.ndarray
    v: np.ndarray


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / max(n, 1e-12)


def power_iteration(wmat: np.ndarray, state: PowerIterState, n_iter: int = 1) -> float:
    """Refine ``state`` in place and return the top singular value estimate."""
    for _ in range(n_iter):
        state.v = _unit(wmat.T @ state.u)
        state.u = _unit(wmat @ state.v)
    return float(state.u @ wmat @ state.v)


def spectral_normalize(weight: Tensor, state: PowerIterState, n_iter: int = 1) -> Tensor:
    """Divide ``weight`` by its power-iteration spectral norm estimate.

    ``n_iter`` power iterations are run first (0 reuses the stored vectors).
    A numerically zero matrix is returned unnormalized with a warning.
    """
    wmat = weight.data.reshape(weight.shape[0], -1)
    if n_iter:
        power_iteration(wmat, state, n_iter)
    sigma = float(state.u @ wmat @ state.v)
    if abs(sigma) < 1e-12:
        warnings.warn("spectral_normalize: weight is numerically zero; skipping normalization", RuntimeWarning, stacklevel=2)
        return weight
    return T.spectral_divide(weight, state.u, state.v)


class SNConv2d(Conv2d):
    """Conv2d whose weight is spectrally normalized on every forward."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, zero=False):
        super().__init__(cin, cout, k, rng, stride, padding, zero)
        self.sn = PowerIterState(
            _unit(rng.standard_normal(cout)).astype(T.get_dtype()),
            _unit(rng.standard_normal(cin * k * k)).astype(T.get_dtype()),
        )
        # align u with W v so the estimate is meaningful before the first update
        power_iteration(self.weight.data.reshape(cout, -1), self.sn, 1)

    def _buffers(self):
        return {"sn_u": self.sn.u, "sn_v": self.sn.v}

    def __call__(self, x: Tensor, update: bool = False) -> Tensor:
        w = spectral_normalize(self.weight, self.sn, n_iter=1 if update else 0)
        return T.conv2d(x, w, self.bias, self.stride, self.padding)


# ---------------------------------------------------------------- U-Net

def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape (N, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# init scale of the last conv in each residual branch and of the output conv
NEAR_ZERO = 1e-10


class GroupNorm(Module):
    def __init__(self, channels: int, max_groups: int = 8):
        self.groups = math.gcd(max_groups, channels)
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.weight, self.bias, self.groups)


class ResBlock(Module):
    """Wide-ResNet block: GroupNorm, SiLU, conv, plus the time projection; twice."""

    def __init__(self, cin: int, cout: int, tdim: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.temb = Linear(tdim, cout, rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, init_scale=NEAR_ZERO)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = T.add_channel_bias(h, self.temb(temb))
        h = self.conv2(T.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


@dataclass(frozen=True)
class UNetConfig:
    image_channels: int = 3
    latent_channels: int = 4
    base: int = 32
    time_dim: int = 64
    num_steps: int = 1000

    def param_count(self) -> int:
        """Closed-form parameter count of :class:`UNet` for this config."""
        B, tdim, img = self.base, self.time_dim, self.image_channels

        def conv(i, o, k):
            return i * o * k * k + o

        def lin(i, o):
            return i * o + o

        def rb(i, o):
            return 2 * i + conv(i, o, 3) + lin(tdim, o) + 2 * o + conv(o, o, 3) + (conv(i, o, 1) if i != o else 0)

        return (
            lin(tdim, tdim)
            + conv(2 * img + self.latent_channels, B, 3)
            + 2 * rb(B, B)
            + rb(B, 2 * B)
            + rb(2 * B, 2 * B)
            + rb(3 * B, B)
            + rb(B, B)
            + 2 * B
            + conv(B, img, 3)
        )


class UNet(Module):
    """Two-resolution residual U-Net predicting the injected noise.

    Input channels are ``x_t``, the degraded image ``y`` and the latent ``c``
    upsampled 2x, concatenated in that order.

    With ``skip_scale`` (one entry per step, normally sqrt(1 - alpha_bar_t))
    the output adds ``skip_scale[t] * x_t``, the optimal noise estimate for
    zero-mean unit-variance Gaussian data, so the network only learns the correction. Residual
    and output convs start near zero, as in the reference DDPM code.
    """

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator, skip_scale=None):
        self.cfg = cfg
        B, tdim = cfg.base, cfg.time_dim
        self.time_mlp = Linear(tdim, tdim, rng)
        self.conv_in = Conv2d(2 * cfg.image_channels + cfg.latent_channels, B, 3, rng)
        self.down0 = [ResBlock(B, B, tdim, rng), ResBlock(B, B, tdim, rng)]
        self.down1 = [ResBlock(B, 2 * B, tdim, rng), ResBlock(2 * B, 2 * B, tdim, rng)]
        self.up0 = [ResBlock(3 * B, B, tdim, rng), ResBlock(B, B, tdim, rng)]
        self.norm_out = GroupNorm(B)
        self.conv_out = Conv2d(B, cfg.image_channels, 3, rng, init_scale=NEAR_ZERO)
        self.skip_scale = None if skip_scale is None else np.asarray(skip_scale, dtype=np.float64)
        if self.skip_scale is not None and self.skip_scale.shape != (cfg.num_steps,):
            raise ShapeError(f"unet: skip_scale needs {cfg.num_steps} entries, got {self.skip_scale.shape}")

    def __call__(self, x_t: Tensor, t, y: Tensor, c: Tensor) -> Tensor:
        x_t, y, c = T.as_tensor(x_t), T.as_tensor(y), T.as_tensor(c)
        if x_t.shape != y.shape:
            raise ShapeError(f"unet: x_t {x_t.shape} and y {y.shape} differ")
        n, _, h, w = y.shape
        if c.shape != (n, self.cfg.latent_channels, h // 2, w // 2) or h % 2 or w % 2:
            raise ShapeError(f"unet: latent {c.shape} does not match image {y.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        if t.min() < 1 or t.max() > self.cfg.num_steps:
            raise ValueError(f"unet: step out of range [1, {self.cfg.num_steps}]: {t}")
        temb = T.silu(self.time_mlp(Tensor(timestep_embedding(t, self.cfg.time_dim))))

        h = self.conv_in(T.concat([x_t, y, T.up2_nearest(c)], axis=1))
        for block in self.down0:
            h = block(h, temb)
        skip = h
        h = T.down2(h)
        for block in self.down1:
            h = block(h, temb)
        h = T.concat([T.up2_nearest(h), skip], axis=1)
        for block in self.up0:
            h = block(h, temb)
        out = self.conv_out(T.silu(self.norm_out(h)))
        if self.skip_scale is None:
            return out
        k = self.skip_scale[t - 1].astype(x_t.data.dtype)[:, None, None, None]
        return out + T.mul(x_t, Tensor(np.broadcast_to(k, x_t.shape)))


# ---------------------------------------------------------------- VAE branch

class Encoder(Module):
    """Five convs, ReLU, 2x average-pool after the first; emits (mu, logvar)."""

    def __init__(self, rng, image_channels=3, latent_channels=4, widths=(32, 64), zero_last=False):
        w1, w2 = widths
        self.latent_channels = latent_channels
        self.convs = [
            Conv2d(image_channels, w1, 3, rng),
            Conv2d(w1, w2, 3, rng),
            Conv2d(w2, w2, 3, rng),
            Conv2d(w2, w2, 3, rng),
            Conv2d(w2, 2 * latent_channels, 3, rng, zero=zero_last),
        ]

    def __call__(self, y: Tensor) -> tuple[Tensor, Tensor]:
        y = T.as_tensor(y)
        if y.ndim != 4 or y.shape[2] % 2 or y.shape[3] % 2:
            raise ShapeError(f"encode needs NCHW input with even extents, got {y.shape}")
        h = T.relu(self.convs[0](y))
        h = T.down2(h)
        for conv in self.convs[1:-1]:
            h = T.relu(conv(h))
        out = self.convs[-1](h)
        k = self.latent_channels
        return T.slice_channels(out, 0, k), T.slice_channels(out, k, 2 * k)


class Decoder(Module):
    """Five convs, ReLU, nearest 2x upsample after the first; linear output."""

    def __init__(self, rng, image_channels=3, latent_channels=4, widths=(64, 32)):
        w1, w2 = widths
        self.latent_channels = latent_channels
        self.convs = [
            Conv2d(latent_channels, w1, 3, rng),
            Conv2d(w1, w2, 3, rng),
            Conv2d(w2, w2, 3, rng),
            Conv2d(w2, w2, 3, rng),
            Conv2d(w2, image_channels, 3, rng),
        ]

    def __call__(self, c: Tensor) -> Tensor:
        c = T.as_tensor(c)
        if c.ndim != 4 or c.shape[1] != self.latent_channels:
            raise ShapeError(f"decode expects {self.latent_channels} latent channels, got {c.shape}")
        h = T.up2_nearest(T.relu(self.convs[0](c)))
        for conv in self.convs[1:-1]:
            h = T.relu(conv(h))
        return self.convs[-1](h)


class ParamHead(Module):
    """Two convs with LeakyReLU, then global average pooling to ``n_out`` values."""

    def __init__(self, rng, latent_channels=4, width=32, n_out=3, zero_last=False):
        self.conv1 = Conv2d(latent_channels, width, 3, rng)
        self.conv2 = Conv2d(width, n_out, 3, rng, zero=zero_last)

    def __call__(self, c: Tensor) -> Tensor:
        h = T.leaky_relu(self.conv1(T.as_tensor(c)), LEAKY_SLOPE)
        return T.mean_spatial(self.conv2(h))


class Discriminator(Module):
    """Eleven spectrally normalized convs: a stride-1 stem, then five
    (stride-2, stride-1) pairs, the last of which emits one channel.
    Global average pooling and a sigmoid give a probability per image."""

    def __init__(self, rng, image_channels=3, in_size=32, widths=(32, 64), zero_last=False):
        w1, w2 = widths
        self.in_size = in_size
        chans = [image_channels, w1, w1, w2] + [w2] * 7 + [1]
        strides = [1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1]
        self.convs = [
            SNConv2d(chans[i], chans[i + 1], 3, rng, stride=strides[i], zero=zero_last and i == 10)
            for i in range(11)
        ]

    def logits(self, img: Tensor, update: bool = False) -> Tensor:
        img = T.as_tensor(img)
        if img.ndim != 4 or img.shape[1:] != (self.convs[0].weight.shape[1], self.in_size, self.in_size):
            raise ShapeError(f"discriminator expects (N, {self.convs[0].weight.shape[1]}, {self.in_size}, {self.in_size}), got {img.shape}")
        h = img
        for i, conv in enumerate(self.convs):
            h = conv(h, update=update)
            if i < 10:
                h = T.leaky_relu(h, LEAKY_SLOPE)
        return T.reshape(T.mean_spatial(h), (img.shape[0],))

    def __call__(self, img: Tensor, update: bool = False) -> Tensor:
        return T.sigmoid(self.logits(img, update))

    def power_step(self) -> None:
        """One power iteration on every layer, as done once per training forward."""
        for conv in self.convs:
            power_iteration(conv.weight.data.reshape(conv.weight.shape[0], -1), conv.sn, 1)
