"""Mean-field variational weight blocks.

A stochastic weight block keeps a per-element variational mean ``mu`` and
an unconstrained scale parameter ``rho`` with scale = softplus(rho), and
is regularized toward an isotropic Gaussian prior N(0, prior_std^2 I).
Sampling uses the reparameterization trick, so gradients flow through
both mu and rho.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DimensionError, NumericError

DEFAULT_EMBEDDING_PRIOR_STD = 0.374
DEFAULT_OUTPUT_PRIOR_STD = 1.0


def softplus_inverse(value: float) -> float:
    """Inverse of softplus for positive scalars: ln(exp(v) - 1)."""
    if value <= 0:
        raise ValueError("softplus is positive; cannot invert non-positive value")
    return float(math.log(math.expm1(value)))


class MeanFieldTensor(nn.Module):
    """Diagonal-Gaussian variational distribution over a weight tensor."""

    def __init__(self, mu: torch.Tensor, rho: torch.Tensor, prior_std: float):
        super().__init__()
        if mu.shape != rho.shape:
            raise DimensionError(f"mu shape {tuple(mu.shape)} != rho shape {tuple(rho.shape)}")
        if prior_std <= 0:
            raise ValueError("prior_std must be positive")
        self.mu = nn.Parameter(mu.to(torch.float64))
        self.rho = nn.Parameter(rho.to(torch.float64))
        self.prior_std = float(prior_std)

    @classmethod
    def from_mean(
        cls,
        mean: torch.Tensor,
        prior_std: float,
        scale_fraction: float = 0.1,
    ) -> "MeanFieldTensor":
        """Initialize means at a given tensor (e.g. pretrained weights) and
        scales at ``scale_fraction * prior_std``."""
        rho0 = softplus_inverse(prior_std * scale_fraction)
        rho = torch.full_like(mean, rho0, dtype=torch.float64)
        return cls(mean.detach().clone(), rho, prior_std)

    @property
    def scale(self) -> torch.Tensor:
        return nn.functional.softplus(self.rho)

    @property
    def shape(self) -> torch.Size:
        return self.mu.shape

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return sample_mean_field(self, eps)

    def draw_eps(self, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(self.mu.shape, dtype=torch.float64, generator=generator)

    def kl(self) -> torch.Tensor:
        return kl_mean_field(self)


def sample_mean_field(mf: MeanFieldTensor, eps: torch.Tensor) -> torch.Tensor:
    """One reparameterized draw: mu + softplus(rho) * eps."""
    if eps.shape != mf.mu.shape:
        raise DimensionError(
            f"eps shape {tuple(eps.shape)} != parameter shape {tuple(mf.mu.shape)}"
        )
    return mf.mu + mf.scale * eps


def kl_mean_field(mf: MeanFieldTensor) -> torch.Tensor:
    """Closed-form KL(q || p) summed over elements.

    Per element, with s = softplus(rho) and prior N(0, prior_std^2):
        ln(prior_std / s) + (s^2 + mu^2) / (2 prior_std^2) - 1/2
    """
    if not (torch.isfinite(mf.mu).all() and torch.isfinite(mf.rho).all()):
        raise NumericError("non-finite variational parameters")
    s = mf.scale
    var_ratio = (s * s + mf.mu * mf.mu) / (2.0 * mf.prior_std**2)
    kl = math.log(mf.prior_std) - torch.log(s) + var_ratio - 0.5
    return kl.sum()


def bayesian_dense_forward(
    inputs: torch.Tensor,
    weight_mf: MeanFieldTensor,
    bias_mf: MeanFieldTensor,
    generator: torch.Generator | None = None,
    noise: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Affine map with one weight/bias realization per call.

    The realization is shared across all rows of ``inputs`` (one sample of
    the weight posterior per Monte Carlo draw). ``noise`` lets the caller
    pin the eps draws, e.g. for finite-difference checks.
    """
    if inputs.shape[-1] != weight_mf.shape[0]:
        raise DimensionError(
            f"input feature dim {inputs.shape[-1]} != weight rows {weight_mf.shape[0]}"
        )
    if noise is None:
        w_eps = weight_mf.draw_eps(generator)
        b_eps = bias_mf.draw_eps(generator)
    else:
        w_eps, b_eps = noise
    weight = weight_mf.sample(w_eps)
    bias = bias_mf.sample(b_eps)
    return inputs @ weight + bias
