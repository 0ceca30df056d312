"""Shared test utilities: finite-difference gradient checks and random instances."""

from __future__ import annotations

import numpy as np
import torch


def max_rel_grad_error(scalar_fn, params, eps: float, max_entries: int = 6,
                       rng: np.random.Generator | None = None) -> float:
    """Worst relative error between autograd and central finite differences.

    scalar_fn must recompute the loss from the current parameter values on
    every call. A random subset of entries per tensor is probed; the relative
    error uses max(|analytic|, |numeric|, 1) as denominator so near-zero
    gradients are compared absolutely.
    """
    rng = rng or np.random.default_rng(0)
    loss = scalar_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            g_flat = g.reshape(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(max_entries, n), replace=False)
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + eps
                lp = float(scalar_fn())
                flat[i] = orig - eps
                lm = float(scalar_fn())
                flat[i] = orig
                numeric = (lp - lm) / (2.0 * eps)
                analytic = float(g_flat[i])
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
                worst = max(worst, err)
    return worst


def grad_check_both_precisions(build_fn, eps: float = 1e-6, max_entries: int = 4,
                               rng: np.random.Generator | None = None):
    """(float32 error, float64 error) of autograd against one numeric reference.

    The numeric gradients come from float64 central differences, which keeps
    the probe clear of piecewise-linear kinks that a float32 step would
    straddle; both precisions share identical initial values by construction.
    """
    rng = rng or np.random.default_rng(0)
    _, fn64, params64 = build_fn(torch.float64)
    grads64 = torch.autograd.grad(fn64(), params64)
    _, fn32, params32 = build_fn(torch.float32)
    grads32 = torch.autograd.grad(fn32(), params32)
    err32 = err64 = 0.0
    with torch.no_grad():
        for p, g64, g32 in zip(params64, grads64, grads32):
            flat = p.reshape(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(max_entries, n), replace=False)
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + eps
                lp = float(fn64())
                flat[i] = orig - eps
                lm = float(fn64())
                flat[i] = orig
                numeric = (lp - lm) / (2.0 * eps)
                a64 = float(g64.reshape(-1)[i])
                a32 = float(g32.reshape(-1)[i])
                err64 = max(err64, abs(a64 - numeric) / max(abs(a64), abs(numeric), 1.0))
                err32 = max(err32, abs(a32 - numeric) / max(abs(a32), abs(numeric), 1.0))
    return err32, err64


def random_orthogonal(dim: int, rng: np.random.Generator) -> torch.Tensor:
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return torch.tensor(q, dtype=torch.get_default_dtype())
