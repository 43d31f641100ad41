"""Reverse-mode differentiation helpers on top of ``torch.autograd``.

``Tape`` adds what the training code needs beyond plain autograd: a forward
pass that names the first operation producing NaN/Inf, an explicit
forward-before-backward contract, and gradient accumulation into named
parameters that can be merged across tapes. ``gradient_check`` compares
reverse-mode gradients with central differences.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import torch
from torch.overrides import TorchFunctionMode

from .errors import NonFiniteError, TapeStateError

__all__ = ["Tape", "FiniteCheckMode", "gradient_check", "merge_gradients", "numerical_gradient"]


class FiniteCheckMode(TorchFunctionMode):
    """Torch function mode that raises on the first op returning a non-finite tensor."""

    def __init__(self):
        super().__init__()
        self.n_ops = 0

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        self.n_ops += 1
        for t in out if isinstance(out, (tuple, list)) else (out,):
            if isinstance(t, torch.Tensor) and t.is_floating_point() and not bool(torch.isfinite(t).all()):
                name = getattr(func, "__qualname__", None) or getattr(func, "__name__", repr(func))
                raise NonFiniteError(f"non-finite value produced by node #{self.n_ops} ({name})")
        return out


class Tape:
    """One forward/backward cycle over a scalar loss.

    Args:
        params: Named parameters receiving gradients, e.g. ``dict(model.named_parameters())``.
        check_finite: Check every intermediate value for NaN/Inf during ``forward``.

    Example:
        >>> w = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
        >>> tape = Tape({"w": w})
        >>> tape.forward(lambda x: (w * x).sum(), torch.tensor([3.0, 4.0], dtype=torch.float64)).item()
        11.0
        >>> tape.backward()["w"].tolist()
        [3.0, 4.0]
    """

    def __init__(self, params: Mapping[str, torch.Tensor], check_finite: bool = True):
        self.params = dict(params)
        self.check_finite = check_finite
        self.loss: torch.Tensor | None = None

    def forward(self, fn: Callable[..., torch.Tensor], *inputs) -> torch.Tensor:
        if self.check_finite:
            with FiniteCheckMode():
                loss = fn(*inputs)
        else:
            loss = fn(*inputs)
        if loss.numel() != 1:
            raise TapeStateError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        if not bool(torch.isfinite(loss)):
            raise NonFiniteError("loss is not finite")
        self.loss = loss.reshape(())
        return self.loss

    def backward(self, scale: float = 1.0) -> dict[str, torch.Tensor]:
        """Accumulate ``scale * d(loss)/d(param)`` into each parameter's ``.grad``."""
        if self.loss is None:
            raise TapeStateError("backward called before forward")
        names = [k for k, p in self.params.items() if p.requires_grad]
        grads = torch.autograd.grad(
            self.loss * scale, [self.params[k] for k in names], allow_unused=True
        )
        for k, g in zip(names, grads):
            p = self.params[k]
            g = torch.zeros_like(p) if g is None else g
            p.grad = g.clone() if p.grad is None else p.grad + g
        self.loss = None
        return {k: self.params[k].grad for k in names}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def merge_gradients(grad_sets: Iterable[Mapping[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Sum per-worker gradient dictionaries name by name."""
    merged: dict[str, torch.Tensor] = {}
    for grads in grad_sets:
        for k, g in grads.items():
            merged[k] = g.clone() if k not in merged else merged[k] + g
    return merged


def numerical_gradient(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, h: float = 1e-6):
    """Central-difference gradient of a scalar function."""
    x = point.detach().clone().reshape(-1)
    grad = torch.empty_like(x)
    with torch.no_grad():
        for i in range(x.numel()):
            old = x[i].item()
            x[i] = old + h
            fp = fn(x.view_as(point)).item()
            x[i] = old - h
            fm = fn(x.view_as(point)).item()
            x[i] = old
            grad[i] = (fp - fm) / (2 * h)
    return grad.view_as(point)


def gradient_check(fn: Callable[[torch.Tensor], torch.Tensor], point, h: float = 1e-6) -> float:
    """Max coordinate-wise relative error between autograd and central differences.

    The denominator is ``max(|g|, 1e-8)`` with ``g`` the reverse-mode gradient.
    """
    point = torch.as_tensor(point, dtype=torch.float64)
    x = point.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    num = numerical_gradient(fn, point, h)
    return float(((g - num).abs() / g.abs().clamp_min(1e-8)).max())
