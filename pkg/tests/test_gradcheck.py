import numpy as np
import pytest

from atvardiff import gradcases  # noqa: F401 - registers the cases
from atvardiff import tensor as T
from atvardiff.gradcheck import REGISTRY, gradient_check, run_cases
from atvardiff.tensor import NonFiniteError, Tensor

CHEAP = [name for name in REGISTRY if "." not in name]
OPS = ["conv2d", "relu", "leaky_relu", "add", "sub", "mul", "scale", "shift", "sigmoid", "silu", "exp", "log", "square",
       "clip", "down2", "up2_nearest", "concat", "slice_channels", "add_channel_bias", "linear", "mean", "sum",
       "mean_spatial", "reshape", "spectral_divide", "group_norm"]
LOSSES = ["reparameterize", "kl_loss", "vae_loss", "adv_gen_loss", "disc_loss", "degrad_loss", "total_loss",
          "diffusion_loss.unet", "vae_loss.encoder_decoder", "disc_loss.discriminator"]


def test_registry_covers_ops_and_losses():
    assert set(OPS) <= set(REGISTRY)
    assert set(LOSSES) <= set(REGISTRY)


def test_sum_is_exact(rng):
    # dyadic inputs and step keep every finite difference exact
    x = Tensor(rng.integers(-8, 8, (3, 4)).astype(float), requires_grad=True)
    assert gradient_check(T.sum, [x], eps=2.0**-8) <= 1e-10


def test_detects_wrong_rule(rng):
    def bad_square(a):
        return T._make(a.data**2, (a,), lambda g: (g * a.data,), "bad_square")

    x = Tensor(rng.uniform(0.5, 1.0, 5), requires_grad=True)
    assert gradient_check(lambda a: T.sum(bad_square(a)), [x]) > 0.4


def test_non_finite_raises():
    x = Tensor(np.array([1e-7]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        gradient_check(lambda a: T.sum(T.log(a)), [x], eps=1e-6)


def test_rejects_bad_eps(rng):
    with pytest.raises(ValueError):
        gradient_check(T.sum, [Tensor(np.ones(2), requires_grad=True)], eps=0)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_on_random_instances(seed):
    results = run_cases(CHEAP, seed=seed)
    bad = [(r.name, r.max_rel_error, r.error) for r in results if not r.passed]
    assert not bad
