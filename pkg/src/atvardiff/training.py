"""Joint training of the diffusion U-Net and the variational branch.

Each step first updates the discriminator on its loss, then updates the
U-Net, encoder, decoder and parameter head together on the weighted total
with the discriminator frozen.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import losses
from . import tensor as T
from .config import TrainConfig, dump
from .data import PairedDataset, load_dataset
from .diffusion import NoiseSchedule, diffusion_loss, make_schedule
from .nn import Decoder, Discriminator, Encoder, Module, ParamHead, UNet, UNetConfig
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

METRIC_KEYS = ("l_diff", "l_vae", "l_adv", "l_degrad", "l_disc")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Cosine annealing from lr_start at step 0 to lr_end at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_start
    w = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    # weighted form keeps both endpoints exact
    return w * lr_start + (1.0 - w) * lr_end


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float, t: int,
              beta1: float = ADAM_BETAS[0], beta2: float = ADAM_BETAS[1], eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update, in place, no weight decay."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise T.ShapeError(f"adam_step: shapes {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]]):
        self.params = dict(named_params)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, self.m[k], self.v[k], lr, self.t)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class Models:
    unet: UNet
    encoder: Encoder
    decoder: Decoder
    param_head: ParamHead
    disc: Discriminator

    def generator_parts(self) -> dict[str, Module]:
        return {"unet": self.unet, "encoder": self.encoder, "decoder": self.decoder, "param_head": self.param_head}

    def named_parameters(self, generator_only: bool = False):
        parts = dict(self.generator_parts())
        if not generator_only:
            parts["disc"] = self.disc
        for prefix, module in parts.items():
            yield from module.named_parameters(prefix + ".")


def build_models(cfg: TrainConfig, rng: np.random.Generator) -> Models:
    c_c = cfg.latent_channels
    return Models(
        unet=UNet(UNetConfig(latent_channels=c_c, base=cfg.base_width, time_dim=cfg.time_dim, num_steps=cfg.T), rng,
                  skip_scale=np.sqrt(1.0 - make_schedule(cfg.T, cfg.beta_start, cfg.beta_end).alpha_bar)),
        encoder=Encoder(rng, latent_channels=c_c),
        decoder=Decoder(rng, latent_channels=c_c),
        param_head=ParamHead(rng, latent_channels=c_c),
        disc=Discriminator(rng, in_size=cfg.crop_size),
    )


@dataclass
class TrainState:
    config: TrainConfig
    models: Models
    opt_g: Adam
    opt_d: Adam
    sched: NoiseSchedule
    rng: np.random.Generator
    step: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    T.set_dtype(np.float64 if cfg.precision == "float64" else np.float32)
    models = build_models(cfg, np.random.default_rng([cfg.seed, 1]))
    return TrainState(
        config=cfg,
        models=models,
        opt_g=Adam(list(models.named_parameters(generator_only=True))),
        opt_d=Adam(list(models.disc.named_parameters("disc."))),
        sched=make_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
        rng=np.random.default_rng([cfg.seed, 2]),
    )


@contextlib.contextmanager
def frozen(module: Module):
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


# ---------------------------------------------------------------- data pipeline

@dataclass(frozen=True)
class AugmentDescriptor:
    offset: tuple[int, int]
    flip_v: bool
    flip_h: bool
    transpose: bool


def apply_augmentation(img: np.ndarray, desc: AugmentDescriptor, crop: int) -> np.ndarray:
    oy, ox = desc.offset
    out = img[..., oy : oy + crop, ox : ox + crop]
    if desc.flip_v:
        out = out[..., ::-1, :]
    if desc.flip_h:
        out = out[..., :, ::-1]
    if desc.transpose:
        out = np.swapaxes(out, -1, -2)
    return np.ascontiguousarray(out)


def augment(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, crop: int,
            p_flip: float = 0.5, p_transpose: float = 0.5, random_crop: bool = True):
    """Same random crop, flips and transpose for the aligned pair (x, y).

    Returns ``(x', y', descriptor)``.
    """
    if x.shape != y.shape:
        raise T.ShapeError(f"augment: unaligned pair {x.shape} vs {y.shape}")
    h, w = x.shape[-2:]
    if h < crop or w < crop:
        raise ValueError(f"augment: image {h}x{w} smaller than crop {crop}")
    if random_crop:
        offset = (int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1)))
    else:
        offset = ((h - crop) // 2, (w - crop) // 2)
    u = rng.random(3)
    desc = AugmentDescriptor(offset, bool(u[0] < p_flip), bool(u[1] < p_flip), bool(u[2] < p_transpose))
    return apply_augmentation(x, desc, crop), apply_augmentation(y, desc, crop), desc


def make_batch(data: PairedDataset, cfg: TrainConfig, step: int):
    """Batch for a global step; a pure function of (seed, step) so resumes replay exactly."""
    epoch, it = divmod(step, cfg.iters_per_epoch)
    n = len(data)
    perm = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
    slots = it * cfg.batch_size + np.arange(cfg.batch_size)
    xs, ys = [], []
    for slot in slots:
        idx = perm[slot % n]
        rng = np.random.default_rng([cfg.seed, 4, epoch, int(slot)])
        xa, ya, _ = augment(data.clean[idx], data.degraded[idx], rng, cfg.crop_size)
        xs.append(xa)
        ys.append(ya)
    dt = T.get_dtype()
    phi = data.phi[perm[slots % n]]
    return np.stack(xs).astype(dt), np.stack(ys).astype(dt), phi.astype(dt)


def sample_step_noise(rng: np.random.Generator, x_shape, latent_shape, num_steps: int) -> dict[str, np.ndarray]:
    """Random draws of one step, in a fixed order: t, diffusion noise, latent noise."""
    dt = T.get_dtype()
    return {
        "t": rng.integers(1, num_steps + 1, size=x_shape[0]),
        "eps": rng.standard_normal(x_shape).astype(dt),
        "eps_c": rng.standard_normal(latent_shape).astype(dt),
    }


def latent_shape(cfg: TrainConfig, x_shape) -> tuple[int, int, int, int]:
    n, _, h, w = x_shape
    return (n, cfg.latent_channels, h // 2, w // 2)


def _check_metrics(phase: str, metrics: dict[str, float]) -> None:
    bad = {k: v for k, v in metrics.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteError(f"non-finite loss in {phase}: " + ", ".join(f"{k}={v}" for k, v in metrics.items()))


def train_step(state: TrainState, batch, return_grads: bool = False):
    """One discriminator update then one generator-side update.

    Returns ``(state, metrics)`` or, with ``return_grads``, also the
    generator gradients taken just before the optimizer step.
    """
    cfg, m = state.config, state.models
    x, y, phi = batch
    lr = cosine_lr(state.step, max(cfg.total_steps - 1, 0), cfg.lr_start, cfg.lr_end)
    draws = sample_step_noise(state.rng, x.shape, latent_shape(cfg, x.shape), cfg.T)
    y_t = Tensor(y)

    # phase A: discriminator
    with T.no_grad():
        mu, logvar = m.encoder(y_t)
        y_hat = m.decoder(losses.reparameterize(mu, logvar, draws["eps_c"]))
    m.disc.power_step()
    state.opt_d.zero_grad()
    l_disc = losses.disc_loss(m.disc(y_t), m.disc(y_hat.detach()))
    _check_metrics("discriminator phase", {"l_disc": l_disc.item()})
    l_disc.backward()
    state.opt_d.step(lr)

    # phase B: generator side, discriminator frozen
    state.opt_g.zero_grad()
    mu, logvar = m.encoder(y_t)
    c = losses.reparameterize(mu, logvar, draws["eps_c"])
    y_hat = m.decoder(c)
    with frozen(m.disc):
        l_adv = losses.adv_gen_loss(m.disc(y_hat))
    l_vae = losses.vae_loss(y_t, y_hat, mu, logvar)
    l_degrad = losses.degrad_loss(phi, m.param_head(c))
    cond = Tensor(np.zeros(c.shape)) if cfg.ablation == "simple-ddpm" else c
    l_diff = diffusion_loss(m.unet, x, y_t, cond, draws["t"], draws["eps"], state.sched)
    metrics = {
        "l_diff": l_diff.item(),
        "l_vae": l_vae.item(),
        "l_adv": l_adv.item(),
        "l_degrad": l_degrad.item(),
        "l_disc": l_disc.item(),
    }
    _check_metrics("generator phase", metrics)
    total = losses.total_loss(l_diff, l_vae, l_adv, l_degrad, cfg.lambdas)
    total.backward()
    grads = None
    if return_grads:
        grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in state.opt_g.params.items()}
    state.opt_g.step(lr)
    state.step += 1
    if return_grads:
        return state, metrics, grads
    return state, metrics


# ---------------------------------------------------------------- checkpointing

def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, p in state.models.named_parameters():
        out[name] = p.data
    for name, buf in state.models.disc.named_buffers("disc."):
        out[name] = buf
    for tag, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for k in opt.params:
            out[f"{tag}.m.{k}"] = opt.m[k]
            out[f"{tag}.v.{k}"] = opt.v[k]
    return out


def save_checkpoint(state: TrainState, path) -> None:
    rng_bytes = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode()
    ckpt.write(path, state_tensors(state), state.step, rng_bytes)


def _assign(target: np.ndarray, value: np.ndarray, name: str) -> None:
    if target.shape != value.shape:
        raise ckpt.CheckpointError(f"{name}: checkpoint shape {value.shape} incompatible with config shape {target.shape}")
    target[...] = value


def load_checkpoint(path, cfg: TrainConfig) -> TrainState:
    """Rebuild the state for ``cfg`` and fill it from ``path``."""
    tensors, step, rng_bytes = ckpt.read(path)
    state = init_state(cfg)
    expected = state_tensors(state)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ckpt.CheckpointError(f"checkpoint/config mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in tensors.items():
        _assign(expected[name], arr, name)
    state.step = step
    state.opt_g.t = state.opt_d.t = step
    state.rng.bit_generator.state = json.loads(rng_bytes.decode())
    return state


# ---------------------------------------------------------------- loop

def _log_line(step: int, lr: float, metrics: dict[str, float]) -> str:
    return " ".join([str(step), repr(lr)] + [repr(metrics[k]) for k in METRIC_KEYS]) + "\n"


def read_metrics_log(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        rows.append((int(parts[0]),) + tuple(float(p) for p in parts[1:]))
    return rows


def train(cfg: TrainConfig, resume: bool = False, stop_at: int | None = None, data: PairedDataset | None = None) -> TrainState:
    """Run (or continue) training; writes checkpoints, config.txt and metrics.log.

    ``stop_at`` ends the run after that many global steps (used to emulate
    an interrupted run).
    """
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump(cfg))
    data = data if data is not None else load_dataset(cfg.dataset)
    if len(data) == 0:
        raise ValueError("empty dataset")
    log_path = out / "metrics.log"
    latest = out / "latest.ckpt"
    if resume and latest.is_file():
        state = load_checkpoint(latest, cfg)
        kept = [ln for ln in log_path.read_text().splitlines(keepends=True) if int(ln.split()[0]) < state.step] if log_path.is_file() else []
        log_path.write_text("".join(kept))
        log.info("resumed from %s at step %d", latest, state.step)
    else:
        state = init_state(cfg)
        log_path.write_text("")
    total = cfg.total_steps
    end = total if stop_at is None else min(total, stop_at)
    with log_path.open("a") as fh:
        while state.step < end:
            s = state.step
            lr = cosine_lr(s, max(total - 1, 0), cfg.lr_start, cfg.lr_end)
            state, metrics = train_step(state, make_batch(data, cfg, s))
            if s % cfg.log_every == 0 or s == total - 1:
                fh.write(_log_line(s, lr, metrics))
                fh.flush()
                log.info("step %d lr %.3g %s", s, lr, " ".join(f"{k}={metrics[k]:.4f}" for k in METRIC_KEYS))
            if state.step % (cfg.iters_per_epoch * cfg.checkpoint_every) == 0 or state.step == end:
                save_checkpoint(state, latest)
    if state.step == total:
        save_checkpoint(state, out / "final.ckpt")
    return state
