"""Closed-form operations on the Poincare ball B^n_c.

Every function works on float64 tensors whose last axis holds the ball
coordinates; leading axes broadcast. All functions are differentiable with
``torch.autograd`` and free of NaN at the removable singularities (zero
tangent vectors, coincident points).

    >>> cfg = BallConfig(c=1.0)
    >>> z = torch.tensor([0.5, 0.0], dtype=torch.float64)
    >>> mobius_add(z, torch.tensor([0.2, 0.0], dtype=torch.float64), cfg)
    tensor([0.6364, 0.0000], dtype=torch.float64)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidArgumentError

__all__ = [
    "BallConfig",
    "Gyroplane",
    "as_tensor",
    "mobius_add",
    "conformal_factor",
    "exp_map",
    "log_map",
    "exp_map0",
    "log_map0",
    "parallel_transport_from_origin",
    "parallel_transport_to_origin",
    "distance",
    "gyroplane_feature",
    "geodesic_interpolate",
    "project_to_ball",
]

DTYPE = torch.float64
NORM_FLOOR = 1e-15
ATANH_CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class BallConfig:
    """Curvature and numerical margins of a Poincare ball.

    Attributes:
        c: Curvature magnitude; the ball has radius ``1/sqrt(c)``.
        dim: Optional ambient dimension. When set, inputs are checked against it.
        boundary_eps: Relative margin kept between projected points and the boundary.
    """

    c: float = 0.7
    dim: int | None = None
    boundary_eps: float = 1e-5

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise InvalidArgumentError(f"curvature must be positive, got {self.c}")
        if self.dim is not None and self.dim < 1:
            raise InvalidArgumentError(f"dim must be >= 1, got {self.dim}")
        if not 0 < self.boundary_eps < 1:
            raise InvalidArgumentError(f"boundary_eps must lie in (0, 1), got {self.boundary_eps}")

    @property
    def sqrt_c(self) -> float:
        return math.sqrt(self.c)

    @property
    def max_norm(self) -> float:
        """Largest Euclidean norm a projected point may have."""
        return (1.0 - self.boundary_eps) / self.sqrt_c


@dataclass
class Gyroplane:
    """Hyperbolic hyperplane through ``b = exp_0(intercept_tangent)`` with normal ``normal``.

    Both fields may carry a leading axis to describe a bank of planes.
    """

    normal: torch.Tensor
    intercept_tangent: torch.Tensor

    def intercept(self, cfg: BallConfig) -> torch.Tensor:
        return exp_map0(self.intercept_tangent, cfg)


def as_tensor(x, check_finite: bool = True) -> torch.Tensor:
    """Convert array-likes to float64 tensors, rejecting NaN/Inf."""
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=DTYPE)
    if t.dtype != DTYPE:
        t = t.to(DTYPE)
    if check_finite and not bool(torch.isfinite(t).all()):
        raise InvalidArgumentError("input contains NaN or Inf")
    return t


def _check_dim(x: torch.Tensor, cfg: BallConfig) -> None:
    if cfg.dim is not None and x.shape[-1] != cfg.dim:
        raise InvalidArgumentError(f"expected last axis of size {cfg.dim}, got {x.shape[-1]}")


def _sqnorm(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(-1, keepdim=True)


def _norm(x: torch.Tensor) -> torch.Tensor:
    return _sqnorm(x).clamp_min(NORM_FLOOR**2).sqrt()


def _atanh(x: torch.Tensor) -> torch.Tensor:
    return torch.atanh(x.clamp(-ATANH_CLAMP, ATANH_CLAMP))


def project_to_ball(x, cfg: BallConfig) -> torch.Tensor:
    """Radially rescale points beyond ``(1 - boundary_eps)/sqrt(c)`` onto that sphere."""
    x = as_tensor(x)
    _check_dim(x, cfg)
    norm = _norm(x)
    scale = torch.where(norm > cfg.max_norm, cfg.max_norm / norm, torch.ones_like(norm))
    return x * scale


def _mobius_add(x: torch.Tensor, y: torch.Tensor, c: float) -> torch.Tensor:
    xy = (x * y).sum(-1, keepdim=True)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c**2 * x2 * y2
    return num / den.clamp_min(NORM_FLOOR)


def mobius_add(z, z2, cfg: BallConfig) -> torch.Tensor:
    """Mobius addition ``z (+)_c z2``; the result is kept strictly inside the ball."""
    z, z2 = as_tensor(z), as_tensor(z2)
    _check_dim(z, cfg)
    return project_to_ball(_mobius_add(z, z2, cfg.c), cfg)


def conformal_factor(z, cfg: BallConfig) -> torch.Tensor:
    """``lambda_z = 2 / (1 - c |z|^2)`` with a trailing singleton axis."""
    z = project_to_ball(z, cfg)
    return 2.0 / (1.0 - cfg.c * _sqnorm(z))


def exp_map(mu, u, cfg: BallConfig) -> torch.Tensor:
    """Exponential map at ``mu`` applied to the tangent vector ``u``."""
    mu, u = as_tensor(mu), as_tensor(u)
    sc = cfg.sqrt_c
    un = _norm(u)
    lam = conformal_factor(mu, cfg)
    second = torch.tanh(sc * lam * un / 2) * u / (sc * un)
    return mobius_add(mu, second, cfg)


def log_map(mu, y, cfg: BallConfig) -> torch.Tensor:
    """Logarithm map at ``mu``: the tangent vector pointing to ``y``. Zero when ``y == mu``."""
    mu, y = as_tensor(mu), as_tensor(y)
    _check_dim(mu, cfg)
    sc = cfg.sqrt_c
    kappa = _mobius_add(-mu, y, cfg.c)
    kn = _norm(kappa)
    lam = conformal_factor(mu, cfg)
    return 2.0 / (sc * lam) * _atanh(sc * kn) * kappa / kn


def exp_map0(u, cfg: BallConfig) -> torch.Tensor:
    """Exponential map at the origin (cheaper closed form)."""
    u = as_tensor(u)
    _check_dim(u, cfg)
    sc = cfg.sqrt_c
    un = _norm(u)
    return project_to_ball(torch.tanh(sc * un) * u / (sc * un), cfg)


def log_map0(y, cfg: BallConfig) -> torch.Tensor:
    """Logarithm map at the origin."""
    y = as_tensor(y)
    _check_dim(y, cfg)
    sc = cfg.sqrt_c
    yn = _norm(y)
    return _atanh(sc * yn) * y / (sc * yn)


def parallel_transport_from_origin(mu, v, cfg: BallConfig) -> torch.Tensor:
    """Transport ``v`` from the origin's tangent space to ``mu``'s: scales by ``1 - c|mu|^2``."""
    mu, v = as_tensor(mu), as_tensor(v)
    return 2.0 / conformal_factor(mu, cfg) * v


def parallel_transport_to_origin(mu, u, cfg: BallConfig) -> torch.Tensor:
    """Inverse of :func:`parallel_transport_from_origin`."""
    mu, u = as_tensor(mu), as_tensor(u)
    return conformal_factor(mu, cfg) / 2.0 * u


def _gyro_norm(z: torch.Tensor, z2: torch.Tensor, c: float) -> torch.Tensor:
    # |(-z) (+) z2| written symmetrically in (z, z2)
    diff2 = _sqnorm(z - z2)
    den = 1 - 2 * c * (z * z2).sum(-1, keepdim=True) + c**2 * _sqnorm(z) * _sqnorm(z2)
    return (diff2 / den.clamp_min(NORM_FLOOR)).clamp_min(0).sqrt()


def distance(z, z2, cfg: BallConfig) -> torch.Tensor:
    """Geodesic distance ``(2/sqrt(c)) atanh(sqrt(c) |(-z) (+) z2|)``, trailing axis dropped."""
    z, z2 = project_to_ball(z, cfg), project_to_ball(z2, cfg)
    sc = cfg.sqrt_c
    n = _gyro_norm(z, z2, cfg.c)
    # sqrt has an infinite derivative at 0; route zero distances through a safe branch
    safe = torch.where(n > 0, n, torch.ones_like(n))
    d = torch.where(n > 0, 2.0 / sc * _atanh(sc * safe), torch.zeros_like(n))
    return d.squeeze(-1)


def gyroplane_feature(z, plane: Gyroplane, cfg: BallConfig) -> torch.Tensor:
    """Signed, scaled hyperbolic distance from ``z`` to a gyroplane.

    ``sign(<a, log_b z>) * |a|_b * d(z, H_{a,b})``. Since ``log_b z`` is a
    positive multiple of ``kappa = (-b) (+) z`` and asinh is odd, this equals
    ``|a|_b / sqrt(c) * asinh(2 sqrt(c) <kappa, a> / ((1 - c|kappa|^2) |a|))``,
    which is smooth across the plane.

    Args:
        z: Points of shape ``(..., n)``.
        plane: Single plane (``normal`` of shape ``(n,)``) or a bank of ``m``
            planes (shape ``(m, n)``); in the latter case the output gains a
            trailing axis of size ``m``.
        cfg: Ball configuration.
    """
    z = as_tensor(z)
    a = as_tensor(plane.normal)
    a_norm_raw = (a * a).sum(-1, keepdim=True).sqrt()
    if bool((a_norm_raw == 0).any()):
        raise InvalidArgumentError("gyroplane normal must be nonzero")
    b = exp_map0(plane.intercept_tangent, cfg)
    bank = a.dim() == 2
    if bank:
        z = z.unsqueeze(-2)
    sc = cfg.sqrt_c
    kappa = _mobius_add(-b, z, cfg.c)
    a_norm = a_norm_raw.clamp_min(NORM_FLOOR)
    lam_b = 2.0 / (1.0 - cfg.c * _sqnorm(b))
    arg = 2 * sc * (kappa * a).sum(-1, keepdim=True) / ((1 - cfg.c * _sqnorm(kappa)).clamp_min(NORM_FLOOR) * a_norm)
    return (lam_b * a_norm / sc * torch.asinh(arg)).squeeze(-1)


def geodesic_interpolate(z1, z2, t: float, cfg: BallConfig) -> torch.Tensor:
    """Point at fraction ``t`` of the geodesic from ``z1`` to ``z2``."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"t must lie in [0, 1], got {t}")
    z1, z2 = as_tensor(z1), as_tensor(z2)
    if t == 0.0:
        return z1.clone()
    return exp_map(z1, t * log_map(z1, z2, cfg), cfg)
