"""Mean-field block contracts: sampling, closed-form KL, dense forward."""

import math

import numpy as np
import pytest
import torch

from deepbgp.bayeslayers import (
    MeanFieldTensor,
    bayesian_dense_forward,
    kl_mean_field,
    sample_mean_field,
    softplus_inverse,
)
from deepbgp.errors import DimensionError


def make_mf(mu, rho, prior_std=1.0) -> MeanFieldTensor:
    return MeanFieldTensor(
        torch.as_tensor(mu, dtype=torch.float64),
        torch.as_tensor(rho, dtype=torch.float64),
        prior_std,
    )


class TestSampling:
    def test_zero_noise_returns_mu(self):
        mf = make_mf([1.5, -2.0, 0.25], [0.3, -1.0, 2.0])
        out = sample_mean_field(mf, torch.zeros(3, dtype=torch.float64))
        assert torch.equal(out, mf.mu)

    def test_degenerate_scale_returns_mu(self):
        mf = make_mf([0.7, -0.1], [-60.0, -60.0])
        eps = torch.tensor([3.0, -5.0], dtype=torch.float64)
        assert torch.allclose(sample_mean_field(mf, eps), mf.mu, atol=1e-20)

    def test_softplus_closed_form(self):
        # mu=0, rho=0 -> scale = ln 2; with eps=1 the sample is ln 2
        mf = make_mf([0.0], [0.0])
        out = sample_mean_field(mf, torch.ones(1, dtype=torch.float64))
        assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_shape_mismatch(self):
        mf = make_mf([0.0, 0.0], [0.0, 0.0])
        with pytest.raises(DimensionError):
            sample_mean_field(mf, torch.zeros(3, dtype=torch.float64))

    def test_linearity_in_eps(self):
        rng = np.random.default_rng(0)
        mf = make_mf(rng.standard_normal(6), rng.standard_normal(6), 0.7)
        e1 = torch.tensor(rng.standard_normal(6))
        e2 = torch.tensor(rng.standard_normal(6))
        a = 1.7
        lhs = sample_mean_field(mf, a * e1 + e2) - sample_mean_field(mf, e2)
        rhs = a * (sample_mean_field(mf, e1) - mf.mu)
        assert torch.allclose(lhs, rhs, atol=1e-12)


class TestKl:
    def test_zero_when_q_equals_p(self):
        prior = 0.8
        mf = make_mf([0.0, 0.0], [softplus_inverse(prior)] * 2, prior)
        assert kl_mean_field(mf).item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_closed_form(self):
        # mu=1, s=1, prior 1: KL = 0 + (1 + 1)/2 - 1/2 = 0.5
        mf = make_mf([1.0], [softplus_inverse(1.0)], 1.0)
        assert mf.kl().item() == pytest.approx(0.5, abs=1e-12)

    def test_monte_carlo_oracle(self):
        """Closed form matches E_q[ln q - ln p] estimated from 100k draws."""
        rng = np.random.default_rng(42)
        mu = rng.standard_normal(10)
        rho = rng.uniform(-1.5, 0.5, 10)
        prior = 0.9
        mf = make_mf(mu, rho, prior)
        s = np.log1p(np.exp(rho))
        draws = mu + s * rng.standard_normal((100_000, 10))
        log_q = -0.5 * np.log(2 * np.pi) - np.log(s) - (draws - mu) ** 2 / (2 * s**2)
        log_p = -0.5 * np.log(2 * np.pi) - np.log(prior) - draws**2 / (2 * prior**2)
        per_draw = (log_q - log_p).sum(axis=1)
        estimate = per_draw.mean()
        stderr = per_draw.std(ddof=1) / math.sqrt(per_draw.size)
        assert mf.kl().item() == pytest.approx(estimate, abs=3 * stderr)

    def test_non_negative_random_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            mf = make_mf(
                rng.standard_normal(4) * 3,
                rng.uniform(-4, 3, 4),
                float(rng.uniform(0.05, 5.0)),
            )
            assert mf.kl().item() >= -1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        mf = make_mf(rng.standard_normal(5), rng.uniform(-1, 1, 5), 0.6)
        kl = kl_mean_field(mf)
        kl.backward()
        step = 1e-5
        for param in (mf.mu, mf.rho):
            flat = param.data.view(-1)
            for c in range(flat.numel()):
                original = float(flat[c])
                with torch.no_grad():
                    flat[c] = original + step
                    plus = float(kl_mean_field(mf))
                    flat[c] = original - step
                    minus = float(kl_mean_field(mf))
                    flat[c] = original
                fd = (plus - minus) / (2 * step)
                ad = float(param.grad.view(-1)[c])
                assert abs(fd - ad) / max(abs(fd), abs(ad), 1e-10) < 1e-6


class TestBayesianDense:
    def test_degenerate_scale_is_deterministic_affine(self):
        rng = np.random.default_rng(1)
        w = make_mf(rng.standard_normal((4, 3)), np.full((4, 3), -60.0))
        b = make_mf(rng.standard_normal(3), np.full(3, -60.0))
        x = torch.tensor(rng.standard_normal((5, 4)))
        out = bayesian_dense_forward(x, w, b, torch.Generator().manual_seed(0))
        expected = x @ w.mu + b.mu
        assert torch.allclose(out, expected, atol=1e-12)

    def test_zero_input_returns_bias_realization(self):
        rng = np.random.default_rng(2)
        w = make_mf(rng.standard_normal((4, 2)), rng.uniform(-1, 0, (4, 2)))
        b = make_mf(rng.standard_normal(2), rng.uniform(-1, 0, 2))
        gen = torch.Generator().manual_seed(5)
        w_eps = w.draw_eps(gen)
        b_eps = b.draw_eps(gen)
        x = torch.zeros((3, 4), dtype=torch.float64)
        out = bayesian_dense_forward(x, w, b, noise=(w_eps, b_eps))
        assert torch.allclose(out, b.sample(b_eps).expand(3, 2), atol=1e-15)

    def test_output_variance_matches_gaussian_propagation(self):
        """Empirical per-coordinate variance over 10k draws matches
        softplus(rho)^2 (x^2 sum) + bias variance within 10%."""
        rng = np.random.default_rng(4)
        w = make_mf(rng.standard_normal((3, 2)), rng.uniform(-1.0, 0.0, (3, 2)))
        b = make_mf(rng.standard_normal(2), rng.uniform(-1.0, 0.0, 2))
        x = torch.tensor(rng.standard_normal((1, 3)))
        gen = torch.Generator().manual_seed(9)
        draws = torch.stack(
            [bayesian_dense_forward(x, w, b, gen)[0] for _ in range(10_000)]
        )
        empirical = draws.var(dim=0, unbiased=True)
        expected = (x[0] ** 2) @ (w.scale**2) + b.scale**2
        assert torch.allclose(empirical, expected, rtol=0.10)

    def test_realization_shared_across_batch(self):
        rng = np.random.default_rng(6)
        w = make_mf(rng.standard_normal((3, 2)), rng.uniform(-1, 0, (3, 2)))
        b = make_mf(rng.standard_normal(2), rng.uniform(-1, 0, 2))
        x = torch.tensor(np.tile(rng.standard_normal(3), (4, 1)))
        out = bayesian_dense_forward(x, w, b, torch.Generator().manual_seed(11))
        assert torch.allclose(out, out[0].expand(4, 2), atol=1e-15)
