"""Dense kernels and gradient checking.

Tensors are plain ``torch.Tensor`` objects and the reverse-mode tape is torch
autograd. This module adds the few kernels the rest of the package relies on
with explicit shape contracts, plus an independent central-difference checker
used to validate every trainable loss.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import torch


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ValueError(f"matmul expects 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax with max subtraction (rows may be ``-inf`` masked)."""
    if m.dim() < 1:
        raise ValueError("softmax_rows needs at least one axis")
    shift = m.amax(dim=-1, keepdim=True)
    shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
    e = torch.exp(m - shift)
    return e / e.sum(dim=-1, keepdim=True)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """Compare autograd against central differences.

    ``f`` is a closure returning a scalar that reads ``params`` (leaf tensors
    with ``requires_grad``). Returns the maximum over checked entries of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``. A non-finite
    loss returns ``inf``. ``max_entries`` subsamples entries per parameter.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    for p in params:
        p.grad = None
    out = f()
    if not torch.isfinite(out).all():
        return float("inf")
    analytic = torch.autograd.grad(out, list(params), allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx: Iterable[int]
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries].tolist()
            else:
                idx = range(flat.numel())
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                if not (torch.isfinite(torch.tensor(hi)) and torch.isfinite(torch.tensor(lo))):
                    return float("inf")
                numeric = (hi - lo) / (2 * eps)
                a = gflat[i].item()
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
                # both sides at roundoff level: treat as agreement
                if abs(a) < 1e-10 and abs(numeric) < 1e-10:
                    err = 0.0
                worst = max(worst, err)
    return worst


def checksum(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of ``tensors`` in iteration order."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
