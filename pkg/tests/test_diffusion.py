from __future__ import annotations

import math

import numpy as np
import pytest

from stsconv.diffusion import (
    Denoiser,
    NoiseSchedule,
    diffuse,
    mae_loss,
    sample,
    ssim,
    ssim_loss,
    step_embedding,
)
from stsconv.tensor import ShapeError, Tensor, grad_check

F64 = np.float64
C1, C2 = 0.01 ** 2, 0.03 ** 2


def leaf(a):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True)


def naive_ssim(a, b, k=7):
    """Direct sliding-window SSIM with population statistics."""
    vals = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            x, y = a[i:i + k, j:j + k], b[i:i + k, j:j + k]
            mx, my = x.mean(), y.mean()
            vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
            cxy = ((x - mx) * (y - my)).mean()
            vals.append((2 * mx * my + C1) * (2 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2)))
    return float(np.mean(vals))


# ------------------------------------------------------------------ schedule


def test_constant_half_beta_alpha():
    s = NoiseSchedule([0.5] * 4)
    assert s.alpha(0) == 1.0
    assert s.alpha(2) == pytest.approx(math.sqrt(0.5) * math.sqrt(0.5), abs=1e-15)
    assert s.alpha(4) == pytest.approx(0.25, abs=1e-15)


def test_zero_betas_leave_data_unchanged(rng):
    s = NoiseSchedule(np.zeros(4))
    x0, eps = rng.random((5, 3)), rng.standard_normal((5, 3))
    np.testing.assert_array_equal(s.alphas, np.ones(5))
    np.testing.assert_array_equal(diffuse(x0, 3, eps, s), x0)


def test_schedule_validation():
    for bad in ([], [0.1, 1.0], [-0.1], [[0.1]]):
        with pytest.raises(ValueError):
            NoiseSchedule(bad)
    with pytest.raises(ValueError):
        NoiseSchedule([0.1]).alpha(2)


@pytest.mark.parametrize("schedule", [NoiseSchedule.vpsde(), NoiseSchedule.linear()])
def test_alpha_and_snr_strictly_decreasing(schedule):
    assert schedule.steps == 4
    assert np.all(np.diff(schedule.alphas) < 0)
    assert np.all(np.diff(schedule.snr()) < 0)


def test_vpsde_matches_continuous_marginal():
    s = NoiseSchedule.vpsde(4, 0.1, 40.0)
    for t in range(5):
        u = t / 4
        log_abar = -0.5 * 0.1 * u - 0.25 * (40.0 - 0.1) * u * u
        assert s.alpha(t) == pytest.approx(math.exp(0.5 * log_abar), rel=1e-12)
    # the last step is noise dominated
    assert s.alpha(4) < 0.01


def test_linear_schedule_endpoints():
    s = NoiseSchedule.linear(4, 1e-4, 0.06)
    np.testing.assert_allclose(s.betas, np.linspace(1e-4, 0.06, 4))
    assert 0.9 < s.alpha(4) < 0.95


def test_diffuse_formula_and_errors(rng):
    s = NoiseSchedule.vpsde()
    x0, eps = rng.random((4, 3)), rng.standard_normal((4, 3))
    a = s.alpha(2)
    np.testing.assert_allclose(diffuse(x0, 2, eps, s), a * x0 + math.sqrt(1 - a * a) * eps, rtol=1e-15)
    np.testing.assert_allclose(diffuse(x0, 2, np.zeros_like(x0), s), a * x0, rtol=1e-15)
    for t in (0, 5):
        with pytest.raises(ValueError):
            diffuse(x0, t, eps, s)
    with pytest.raises(ValueError):
        diffuse(x0, 1, eps[:2], s)


def test_diffuse_is_linear(rng):
    s = NoiseSchedule.vpsde()
    x1, x2, e1, e2 = (rng.standard_normal((6, 5)) for _ in range(4))
    a, b = 0.7, -1.3
    for t in range(1, 5):
        lhs = diffuse(a * x1 + b * x2, t, a * e1 + b * e2, s)
        rhs = a * diffuse(x1, t, e1, s) + b * diffuse(x2, t, e2, s)
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)


# ------------------------------------------------------------------ denoiser


def test_step_embedding_rows():
    np.testing.assert_array_equal(step_embedding(0, 4), [0.0, 1.0, 0.0, 1.0])
    assert step_embedding(3, 8)[0] == math.sin(3.0)


def test_denoiser_shapes_and_zero_init_output(rng):
    den = Denoiser(10, 8, 8, 3, rng, F64)
    cond = Tensor(rng.standard_normal((7, 8)))
    outs = [den(rng.standard_normal((7, 10)), t, cond).data for t in (1, 4)]
    for o in outs:
        assert o.shape == (7, 10)
        np.testing.assert_array_equal(o, np.zeros((7, 10)))
    den.out.bias.data[:] = np.arange(10.0)
    o = den(rng.standard_normal((7, 10)), 2, cond).data
    np.testing.assert_array_equal(o, np.tile(np.arange(10.0), (7, 1)))


def test_denoiser_length_mismatch(rng):
    den = Denoiser(10, 8, 8, 2, rng, F64)
    with pytest.raises(ShapeError):
        den(np.zeros((6, 10)), 1, Tensor(np.zeros((7, 8))))


def _live_denoiser(rng):
    den = Denoiser(6, 4, 4, 2, rng, F64)
    den.out.weight.data[:] = rng.standard_normal(den.out.weight.shape) * 0.3
    return den


def test_denoiser_grad_check(rng):
    den = _live_denoiser(rng)
    cond = Tensor(rng.standard_normal((5, 4)))
    w = Tensor(rng.standard_normal((5, 6)))
    assert grad_check(lambda x: (den(x, 2, cond) * w).sum(), leaf(rng.standard_normal((5, 6))), h=1e-6) < 1e-3
    assert grad_check(lambda c: (den(np.ones((5, 6)), 3, c) * w).sum(), leaf(cond.data), h=1e-6) < 1e-3


def test_sample_is_deterministic_and_shaped(rng):
    den = _live_denoiser(rng)
    cond = Tensor(rng.standard_normal((9, 4)))
    s = NoiseSchedule.vpsde()
    a, b = sample(den, cond, s, seed=5), sample(den, cond, s, seed=5)
    assert a.shape == (9, 6)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, sample(den, cond, s, seed=6))


# -------------------------------------------------------------------- losses


def test_mae_examples(rng):
    x = rng.random((4, 5))
    assert mae_loss(x, x).item() == 0.0
    assert mae_loss(x + 0.1, x).item() == pytest.approx(0.1, abs=1e-12)
    d = np.array([[0.3, -0.1], [-0.2, 0.0]])
    assert mae_loss(d, np.zeros((2, 2))).item() == pytest.approx((0.3 + 0.1 + 0.2 + 0.0) / 4, abs=1e-15)
    with pytest.raises(ShapeError):
        mae_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_identity(rng):
    x = rng.random((10, 12))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("a, b", [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5)])
def test_ssim_constant_images_closed_form(a, b):
    expected = (2 * a * b + C1) / (a * a + b * b + C1)
    A, B = np.full((9, 10), a), np.full((9, 10), b)
    assert ssim(A, B) == pytest.approx(expected, abs=1e-10)
    assert 1 - ssim_loss(A, B).item() == pytest.approx(expected, abs=1e-10)


def test_ssim_matches_naive_windows(rng):
    a, b = rng.random((12, 14)), rng.random((12, 14))
    oracle = naive_ssim(a, b)
    assert ssim(a, b) == pytest.approx(oracle, abs=1e-10)
    assert 1 - ssim_loss(a, b).item() == pytest.approx(oracle, abs=1e-10)


def test_anticorrelated_checkerboards_near_maximum_loss():
    i, j = np.indices((14, 16))
    a = ((i + j) % 2).astype(float)
    b = 1.0 - a
    oracle = 1.0 - naive_ssim(a, b)
    loss = ssim_loss(a, b).item()
    assert loss == pytest.approx(oracle, abs=1e-10)
    assert loss > 1.99


def test_ssim_symmetry(rng):
    a, b = rng.random((11, 9)), rng.random((11, 9))
    assert abs(ssim_loss(a, b).item() - ssim_loss(b, a).item()) < 1e-10


def test_ssim_range_checks(rng):
    x = rng.random((8, 8))
    with pytest.raises(ValueError):
        ssim_loss(x + 0.01, x)
    with pytest.raises(ValueError):
        ssim_loss(x, x - 0.01)
    # within tolerance and non-strict prediction
    ssim_loss(x * 1.0005, x * 0.999)
    ssim_loss(x + 0.5, x, strict=False)
    with pytest.raises(ShapeError):
        ssim_loss(x, x[:5])


def test_small_inputs_shrink_window(rng):
    a, b = rng.random((3, 80)), rng.random((3, 80))
    assert 1 - ssim_loss(a, b).item() == pytest.approx(ssim(a, b), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_loss_grad_checks(seed):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0.05, 0.95, (9, 8))
    x = leaf(rng.uniform(0.05, 0.95, (9, 8)))
    assert grad_check(lambda p: ssim_loss(p, target), x, h=1e-6) < 1e-3
    assert grad_check(lambda p: mae_loss(p, target), x, h=1e-6) < 1e-3
