"""Wrapped normal distributions on the Poincare ball and the priors built from them.

Sampling is reparametrized: callers pass standard-normal noise explicitly, so
every function here is deterministic and differentiable in its parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import InvalidArgumentError
from .geometry import (
    BallConfig,
    as_tensor,
    conformal_factor,
    distance,
    exp_map,
    log_map,
    parallel_transport_from_origin,
    parallel_transport_to_origin,
    project_to_ball,
)

PRIOR_KINDS = ("standard", "vamp")


@dataclass
class WrappedNormalParams:
    """Location ``mu`` on the ball and diagonal tangent-space scale ``sigma``."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.sigma = as_tensor(self.sigma)
        if bool((self.sigma <= 0).any()):
            raise InvalidArgumentError("sigma entries must be positive")


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "standard"
    K: int = 1

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise InvalidArgumentError(f"prior kind must be one of {PRIOR_KINDS}, got {self.kind!r}")
        if self.kind == "vamp" and self.K < 1:
            raise InvalidArgumentError("vamp prior needs K >= 1")


def sample_wrapped_normal(params: WrappedNormalParams, noise, cfg: BallConfig) -> torch.Tensor:
    """Map standard-normal ``noise`` to a wrapped-normal sample.

    ``v = sigma * noise`` is transported from the origin to ``mu`` and pushed
    through ``exp_mu``.
    """
    noise = as_tensor(noise)
    v = params.sigma * noise
    u = parallel_transport_from_origin(params.mu, v, cfg)
    return exp_map(params.mu, u, cfg)


def _log_sinhc(x: torch.Tensor) -> torch.Tensor:
    """``log(sinh(x)/x)`` for ``x >= 0`` without overflow or 0/0."""
    small = x < 1e-3
    xs = torch.where(small, x, torch.zeros_like(x))
    xl = torch.where(small, torch.ones_like(x), x)
    series = xs**2 / 6 - xs**4 / 180
    large = xl + torch.log1p(-torch.exp(-2 * xl)) - math.log(2.0) - torch.log(xl)
    return torch.where(small, series, large)


def log_abs_det_jacobian(mu, z, cfg: BallConfig) -> torch.Tensor:
    """``log |det dz/dv|`` of the sampling chain ``v -> z`` in Euclidean coordinates.

    The exponential map distorts Riemannian volume by ``(sinh(sqrt(c) r) /
    (sqrt(c) r))^(n-1)`` with ``r = d(mu, z)``; converting Riemannian volume at
    ``z`` to Lebesgue measure and folding in the origin transport leaves a
    factor ``(2 / lambda_z)^n`` (which is ``(lambda_0/lambda_mu)^n`` at z = mu).
    """
    z = project_to_ball(z, cfg)
    n = z.shape[-1]
    r = distance(mu, z, cfg)
    lam_z = conformal_factor(z, cfg).squeeze(-1)
    return (n - 1) * _log_sinhc(cfg.sqrt_c * r) + n * torch.log(2.0 / lam_z)


def log_prob_wrapped_normal(params: WrappedNormalParams, z, cfg: BallConfig) -> torch.Tensor:
    """Log density (w.r.t. Lebesgue measure on the ball) of a wrapped normal.

    Only used by diagnostics and metrics; training never evaluates it.
    """
    z = project_to_ball(z, cfg)
    mu, sigma = params.mu, params.sigma
    u = log_map(mu, z, cfg)
    v = parallel_transport_to_origin(mu, u, cfg)
    n = z.shape[-1]
    log_normal = (
        -0.5 * ((v / sigma) ** 2).sum(-1) - torch.log(sigma).sum(-1) - 0.5 * n * math.log(2 * math.pi)
    )
    return log_normal - log_abs_det_jacobian(mu, z, cfg)


def standard_prior_params(n: int) -> WrappedNormalParams:
    return WrappedNormalParams(torch.zeros(n, dtype=torch.float64), torch.ones(n, dtype=torch.float64))


def sample_prior(
    spec: PriorSpec,
    noise,
    cfg: BallConfig,
    bank: Sequence[WrappedNormalParams] | None = None,
    component=None,
) -> torch.Tensor:
    """Draw prior samples from reparametrization noise.

    Args:
        spec: Standard wrapped normal or VampPrior.
        noise: Standard-normal draws of shape ``(..., n)``.
        cfg: Ball configuration.
        bank: For ``vamp``, the K posterior parameter sets (one per pseudo-input).
        component: For ``vamp``, integer tensor of mixture indices broadcastable
            to ``noise.shape[:-1]``, drawn uniformly from ``{0..K-1}`` by the caller.
    """
    noise = as_tensor(noise)
    n = noise.shape[-1]
    if spec.kind == "standard":
        return sample_wrapped_normal(standard_prior_params(n), noise, cfg)
    if not bank:
        raise InvalidArgumentError("vamp prior needs a nonempty bank of posterior parameters")
    if component is None:
        raise InvalidArgumentError("vamp prior needs mixture component indices")
    mus = torch.stack([p.mu.expand(n) for p in bank])
    sigmas = torch.stack([p.sigma.expand(n) for p in bank])
    component = torch.as_tensor(component, dtype=torch.long)
    params = WrappedNormalParams(mus[component], sigmas[component])
    return sample_wrapped_normal(params, noise, cfg)


def log_prob_prior(
    spec: PriorSpec, z, cfg: BallConfig, bank: Sequence[WrappedNormalParams] | None = None
) -> torch.Tensor:
    """Prior log density; the VampPrior is a uniform mixture over ``bank``."""
    z = as_tensor(z)
    if spec.kind == "standard":
        return log_prob_wrapped_normal(standard_prior_params(z.shape[-1]), z, cfg)
    if not bank:
        raise InvalidArgumentError("vamp prior needs a nonempty bank of posterior parameters")
    comps = torch.stack([log_prob_wrapped_normal(p, z, cfg) for p in bank], dim=-1)
    return torch.logsumexp(comps, dim=-1) - math.log(len(bank))
