"""Restoration with a trained model: latent from the encoder mean, then ancestral sampling."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .diffusion import ddpm_sample
from .tensor import Tensor
from .training import Models, load_checkpoint


class Restorer:
    """Callable ``(y_batch, indices) -> restored`` for :func:`metrics.evaluate`.

    Each image's sampling noise comes from its own stream keyed by
    ``(seed, index)``.
    """

    def __init__(self, models: Models, cfg: TrainConfig, sched, seed: int = 0):
        self.models = models
        self.cfg = cfg
        self.sched = sched
        self.seed = seed

    @classmethod
    def from_checkpoint(cls, path, cfg: TrainConfig, seed: int = 0) -> Restorer:
        state = load_checkpoint(path, cfg)
        return cls(state.models, cfg, state.sched, seed)

    def latent(self, y: np.ndarray) -> Tensor:
        n, _, h, w = y.shape
        if self.cfg.ablation == "simple-ddpm":
            return Tensor(np.zeros((n, self.cfg.latent_channels, h // 2, w // 2)))
        with T.no_grad():
            mu, _ = self.models.encoder(Tensor(y))
        return mu

    def estimate_phi(self, y: np.ndarray) -> np.ndarray:
        with T.no_grad():
            mu, _ = self.models.encoder(Tensor(y))
            return self.models.param_head(mu).data

    def __call__(self, y: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        y = np.asarray(y, dtype=T.get_dtype())
        rngs = [np.random.default_rng([self.seed, int(i)]) for i in indices]
        return ddpm_sample(self.models.unet, y, self.latent(y), self.sched, rngs)
