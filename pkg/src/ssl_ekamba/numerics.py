"""Float64 tensor helpers, nonlinearities and a finite-difference gradient oracle.

Tensors are ``torch.Tensor`` in float64; learnable tensors are
``torch.nn.Parameter`` whose ``.grad`` holds the accumulated gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

DTYPE = torch.float64


class NonFiniteError(ValueError):
    pass


def tensor(data, *, checked: bool = True) -> torch.Tensor:
    """Build a float64 tensor, rejecting NaN/Inf when ``checked``."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if checked and not bool(torch.isfinite(t).all()):
        raise NonFiniteError("tensor contains NaN or Inf")
    return t


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    # log(1 + e^x) without overflow for large x
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("softmax of an empty vector")
    z = v - v.max(dim=dim, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
) -> float:
    """Compare autograd against central differences.

    ``f`` is re-evaluated with each scalar entry of each parameter nudged by
    ``+-eps`` in place. Returns the max over all entries of
    ``|analytic - fd| / max(1, |fd|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    out = f()
    if out.numel() != 1:
        raise ValueError("f must return a scalar")
    if not torch.isfinite(out):
        raise NonFiniteError("f returned a non-finite value")
    grads = torch.autograd.grad(out, params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            analytic = torch.zeros_like(flat) if g is None else g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                if not (torch.isfinite(torch.tensor(up)) and torch.isfinite(torch.tensor(down))):
                    raise NonFiniteError("f returned a non-finite value under perturbation")
                fd = (up - down) / (2 * eps)
                err = abs(analytic[i].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst
