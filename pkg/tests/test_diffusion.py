import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from atvardiff import tensor as T
from atvardiff.diffusion import ddpm_sample, diffusion_loss, make_schedule, q_sample
from atvardiff.nn import UNet, UNetConfig
from atvardiff.tensor import NonFiniteError, Tensor


def zero_model(x, t, y, c):
    return Tensor(np.zeros(x.shape))


def test_paper_schedule_endpoints():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[0] == 0.9999
    oracle = math.prod(1.0 - (1e-4 + (0.02 - 1e-4) * i / 999) for i in range(1000))
    assert s.alpha_bar[-1] == pytest.approx(oracle, rel=1e-12)
    assert s.alpha_bar[-1] == pytest.approx(4.04e-5, rel=1e-2)


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha_bar.tolist() == [0.5]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 1500), st.floats(1e-5, 0.1), st.floats(0.0, 0.8))
def test_schedule_invariants(steps, lo, width):
    hi = min(lo + width + 1e-6, 0.999)
    s = make_schedule(steps, lo, hi)
    # past ~700 nats of decay alpha_bar underflows to 0.0 and cannot stay strictly decreasing
    assume(-np.log1p(-s.beta).sum() < 700)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.beta) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < s.alpha_bar[0] < 1
    running = 1.0
    for t in range(steps):
        running *= s.alpha[t]
        assert abs(s.alpha_bar[t] - running) <= 1e-12


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_input(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_examples():
    s = make_schedule(1, 0.75, 0.75)  # alpha_bar = 0.25
    out = q_sample(np.ones((2, 3)), 1, np.zeros((2, 3)), s)
    assert np.array_equal(out, np.full((2, 3), 0.5))
    tiny = make_schedule(10, 1e-9, 1e-9)
    x0 = np.linspace(-1, 1, 6)
    np.testing.assert_allclose(q_sample(x0, 1, np.zeros(6), tiny), x0, atol=1e-8)
    with pytest.raises(ValueError):
        q_sample(x0, 11, np.zeros(6), tiny)


def test_q_sample_monte_carlo(rng):
    s = make_schedule(1000, 1e-4, 0.02)
    x0 = np.array([0.8, -0.3, 0.0])
    for t in (1, 100, 500, 1000):
        draws = q_sample(np.broadcast_to(x0, (10_000, 3)), t, rng.standard_normal((10_000, 3)), s)
        ab = s.alpha_bar[t - 1]
        assert np.all(np.abs(draws.mean(0) - np.sqrt(ab) * x0) <= 3 * np.sqrt((1 - ab) / 10_000))
        np.testing.assert_allclose(draws.var(0), 1 - ab, rtol=0.05)


def test_q_sample_distance_grows_with_t(rng):
    s = make_schedule(100, 1e-3, 0.2)
    x0 = rng.uniform(-1, 1, (1000, 3, 4, 4))
    dist = [np.linalg.norm((q_sample(x0, t, rng.standard_normal(x0.shape), s) - x0).reshape(1000, -1), axis=1).mean()
            for t in (1, 10, 50, 100)]
    assert all(b >= a for a, b in zip(dist, dist[1:]))


def test_q_sample_per_sample_steps(rng):
    s = make_schedule(10, 1e-3, 0.2)
    x0, eps = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    t = np.array([1, 5, 10])
    out = q_sample(x0, t, eps, s)
    for i in range(3):
        np.testing.assert_allclose(out[i], q_sample(x0[i], int(t[i]), eps[i], s), atol=1e-15)
    tensor_out = q_sample(Tensor(x0), t, Tensor(eps), s)
    np.testing.assert_allclose(tensor_out.data, out, atol=1e-15)


def test_diffusion_loss_stubs(rng):
    s = make_schedule(10, 1e-3, 0.2)
    x0, eps = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    exact = diffusion_loss(lambda x, t, y, c: Tensor(eps), x0, None, None, np.array([2, 7]), eps, s)
    assert abs(exact.item()) <= 1e-10
    off = diffusion_loss(lambda x, t, y, c: Tensor(eps + 1.0), x0, None, None, 3, eps, s)
    assert off.item() == pytest.approx(1.0, abs=1e-12)


def test_sampler_two_step_trace():
    s = make_schedule(2, 0.1, 0.3)
    y = np.zeros((2, 3, 4, 4))
    out = ddpm_sample(zero_model, y, None, s, np.random.default_rng(5))
    g = np.random.default_rng(5)
    x2 = g.standard_normal(y.shape)
    x1 = x2 / math.sqrt(1 - 0.3) + math.sqrt(0.3) * g.standard_normal(y.shape)
    x0 = x1 / math.sqrt(1 - 0.1)
    np.testing.assert_allclose(out, np.clip(x0, -1, 1), atol=1e-12, rtol=0)


def test_sampler_two_step_trace_with_constant_eps():
    s = make_schedule(2, 0.1, 0.3)
    y = np.zeros((1, 1, 2, 2))
    out = ddpm_sample(lambda x, t, y, c: Tensor(np.full(x.shape, 0.2)), y, None, s, np.random.default_rng(9))
    g = np.random.default_rng(9)
    ab = [0.9, 0.9 * 0.7]
    x = g.standard_normal(y.shape)
    x = (x - 0.3 / math.sqrt(1 - ab[1]) * 0.2) / math.sqrt(0.7) + math.sqrt(0.3) * g.standard_normal(y.shape)
    x = (x - 0.1 / math.sqrt(1 - ab[0]) * 0.2) / math.sqrt(0.9)
    np.testing.assert_allclose(out, np.clip(x, -1, 1), atol=1e-12, rtol=0)


def test_sampler_deterministic_and_bounded(rng):
    net = UNet(UNetConfig(base=4, time_dim=8, latent_channels=2, num_steps=5), rng)
    s = make_schedule(5, 0.01, 0.3)
    y, c = rng.uniform(-1, 1, (2, 3, 8, 8)), rng.standard_normal((2, 2, 4, 4))
    a = ddpm_sample(net, y, c, s, np.random.default_rng(1))
    b = ddpm_sample(net, y, c, s, np.random.default_rng(1))
    d = ddpm_sample(net, y, c, s, np.random.default_rng(2))
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, d)
    assert a.min() >= -1 and a.max() <= 1


def test_per_sample_streams_ignore_batch_composition(rng):
    net = UNet(UNetConfig(base=4, time_dim=8, latent_channels=2, num_steps=4), rng)
    s = make_schedule(4, 0.01, 0.3)
    y, c = rng.uniform(-1, 1, (3, 3, 8, 8)), rng.standard_normal((3, 2, 4, 4))
    full = ddpm_sample(net, y, c, s, [np.random.default_rng([0, i]) for i in range(3)])
    alone = ddpm_sample(net, y[1:2], c[1:2], s, [np.random.default_rng([0, 1])])
    np.testing.assert_allclose(full[1:2], alone, atol=1e-12)


def test_sampler_aborts_on_non_finite():
    s = make_schedule(3, 0.1, 0.2)
    with pytest.raises(NonFiniteError, match="step 3"):
        ddpm_sample(lambda x, t, y, c: Tensor(np.full(x.shape, np.inf)), np.zeros((1, 1, 2, 2)), None, s, np.random.default_rng(0))


def test_sampler_matches_gaussian_posterior_chain():
    """Optimal predictor for x0 ~ N(m, s^2) on a one-pixel image, T = 3.

    The sampler is linear in its inputs here, so the mean and variance of its
    output follow from propagating moments through the recursion.
    """
    m, s2 = 0.3, 0.04
    sched = make_schedule(3, 0.05, 0.4)

    def oracle(x, t, y, c):
        ab = sched.alpha_bar[t[0] - 1]
        return Tensor(np.sqrt(1 - ab) * (x.data - np.sqrt(ab) * m) / (ab * s2 + 1 - ab))

    n = 40_000
    out = ddpm_sample(oracle, np.zeros((n, 1, 1, 1)), None, sched, np.random.default_rng(3)).ravel()

    mean, var = 0.0, 1.0
    for t in (3, 2, 1):
        ab, a, b = sched.alpha_bar[t - 1], sched.alpha[t - 1], sched.beta[t - 1]
        k = np.sqrt(1 - ab) / (ab * s2 + 1 - ab)
        coef = b / np.sqrt(1 - ab)
        mean = (mean - coef * k * (mean - np.sqrt(ab) * m)) / np.sqrt(a)
        var = ((1 - coef * k) / np.sqrt(a)) ** 2 * var + (b if t > 1 else 0.0)
    assert abs(out.mean() - mean) <= 4 * np.sqrt(var / n)
    assert out.var() == pytest.approx(var, rel=0.05)
