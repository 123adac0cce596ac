import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fhvae import tensor as tn
from fhvae.gaussian import DiagGaussian, PriorConfig, kl, log_pdf, reparam_sample
from fhvae.tensor import Tensor


def g(mean, var):
    return DiagGaussian(Tensor(np.asarray(mean, dtype=float)), Tensor(np.asarray(var, dtype=float)))


def test_prior_default():
    assert PriorConfig().sigma_sq_z2 == 0.25
    with pytest.raises(ValueError):
        PriorConfig(0.0)


def test_var_must_be_positive():
    with pytest.raises(ValueError):
        g([0.0, 0.0], [1.0, 0.0])


@pytest.mark.parametrize("x,mean,var,expect", [
    ([0.0], [0.0], [1.0], -0.918939),
    ([0.4], [0.4], [0.25], -0.225791),
    ([0.0, 0.0], [0.0, 0.0], [1.0, 1.0], -1.837877),
])
def test_log_pdf_examples(x, mean, var, expect):
    assert float(log_pdf(g(mean, var), x).data) == pytest.approx(expect, abs=1e-6)


def test_log_pdf_dimension_mismatch():
    with pytest.raises(tn.DimensionError):
        log_pdf(g([0.0, 0.0], [1.0, 1.0]), [0.0])


def test_kl_examples():
    p = g([0.3, -1.0], [0.5, 2.0])
    assert float(kl(p, p).data) == pytest.approx(0.0, abs=1e-15)
    assert float(kl(g([1.0, 1.0], [1.0, 1.0]), g([0.0, 0.0], [1.0, 1.0])).data) == pytest.approx(1.0, abs=1e-12)
    assert float(kl(g([0.0], [1.0]), g([0.0], [0.25])).data) == pytest.approx(0.806853, abs=1e-6)


def test_kl_dimension_mismatch():
    with pytest.raises(tn.DimensionError):
        kl(g([0.0], [1.0]), g([0.0, 0.0], [1.0, 1.0]))


pos = st.floats(0.05, 5.0)
real = st.floats(-3.0, 3.0)


@given(st.lists(st.tuples(real, pos, real, pos), min_size=1, max_size=5))
def test_kl_nonnegative(rows):
    qm, qv, pm, pv = map(np.array, zip(*rows))
    assert float(kl(g(qm, qv), g(pm, pv)).data) >= -1e-12


@given(st.lists(st.tuples(real, pos), min_size=1, max_size=5))
def test_kl_zero_iff_identical(rows):
    m, v = map(np.array, zip(*rows))
    assert abs(float(kl(g(m, v), g(m, v)).data)) <= 1e-12
    assert float(kl(g(m + 0.5, v), g(m, v)).data) > 0


def test_kl_matches_monte_carlo(rng):
    q, p = g([0.5, -0.2, 1.0], [0.7, 1.3, 0.4]), g([0.0, 0.3, 0.8], [1.0, 0.5, 2.0])
    eps = rng.standard_normal((100_000, 3))
    z = q.mean.data + np.sqrt(q.var.data) * eps
    lq = -0.5 * (np.log(2 * np.pi * q.var.data) + (z - q.mean.data) ** 2 / q.var.data).sum(1)
    lp = -0.5 * (np.log(2 * np.pi * p.var.data) + (z - p.mean.data) ** 2 / p.var.data).sum(1)
    d = lq - lp
    se = d.std() / math.sqrt(len(d))
    assert abs(d.mean() - float(kl(q, p).data)) < 3 * se


def test_log_pdf_integrates_to_one():
    mean, var = 0.7, 0.3
    sd = math.sqrt(var)
    xs = np.linspace(mean - 5 * sd, mean + 5 * sd, 2001)
    dens = np.exp(log_pdf(DiagGaussian(Tensor(np.full((xs.size, 1), mean)), Tensor(var)), xs[:, None]).data)
    # the 10-sigma window itself leaves out 5.7e-7 of the mass
    mass = np.trapezoid(dens, xs)
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_batched_rows_are_independent(rng):
    m, v, x = rng.standard_normal((4, 3)), rng.uniform(0.5, 2, (4, 3)), rng.standard_normal((4, 3))
    batched = log_pdf(g(m, v), x).data
    rows = [float(log_pdf(g(m[i], v[i]), x[i]).data) for i in range(4)]
    np.testing.assert_allclose(batched, rows, rtol=1e-13)


def test_reparam_examples():
    assert np.array_equal(reparam_sample(g([1.5, -2.0], [3.0, 0.1]), np.zeros(2)).data, [1.5, -2.0])
    assert float(reparam_sample(g([0.0], [4.0]), np.ones(1)).data[0]) == 2.0


def test_reparam_moments(rng):
    mean, var = np.array([0.5, -1.0]), np.array([2.0, 0.25])
    eps = rng.standard_normal((100_000, 2))
    s = reparam_sample(DiagGaussian(Tensor(np.tile(mean, (100_000, 1))), Tensor(np.tile(var, (100_000, 1)))), eps).data
    n = len(s)
    assert np.all(np.abs(s.mean(0) - mean) < 3 * np.sqrt(var / n))
    # standard error of a sample variance of normal data is var * sqrt(2 / (n - 1))
    assert np.all(np.abs(s.var(0, ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1)))


def test_reparam_gradients_reach_mean_and_var_not_eps(rng):
    mean, var = Tensor(rng.standard_normal(3), requires_grad=True), Tensor(rng.uniform(0.5, 2, 3), requires_grad=True)
    eps = Tensor(rng.standard_normal(3), requires_grad=True)
    tn.sum(reparam_sample(DiagGaussian(mean, var), eps)).backward()
    np.testing.assert_allclose(mean.grad, np.ones(3))
    np.testing.assert_allclose(var.grad, eps.data / (2 * np.sqrt(var.data)))
    assert not np.any(eps.grad)


def test_reparam_shape_mismatch():
    with pytest.raises(tn.DimensionError):
        reparam_sample(g([0.0, 0.0], [1.0, 1.0]), np.zeros(3))


def test_from_logvar_floor():
    d = DiagGaussian.from_logvar(Tensor([0.0]), Tensor([-800.0]), floor=1e-6)
    assert float(d.var.data[0]) == pytest.approx(1e-6)
