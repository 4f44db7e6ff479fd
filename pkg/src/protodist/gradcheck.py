"""Central finite-difference gradient verification.

Used by the test suite to check every loss term's autograd gradients
against an independent numerical estimate, and by anyone debugging new
objective terms. Works by perturbing single parameter coordinates in
place, so the probed function must be a pure function of the parameters.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch


def fd_gradient(
    f: Callable[[], float],
    param: torch.Tensor,
    flat_indices: Sequence[int],
    h: float = 1e-6,
) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h at the given coordinates.

    ``f`` re-evaluates the quantity of interest from current parameter
    values; ``param`` is mutated in place and restored afterwards.
    """
    flat = param.detach().view(-1)
    grads = np.empty(len(flat_indices), dtype=np.float64)
    for out, idx in enumerate(flat_indices):
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
        f_plus = float(f())
        with torch.no_grad():
            flat[idx] = orig - h
        f_minus = float(f())
        with torch.no_grad():
            flat[idx] = orig
        grads[out] = (f_plus - f_minus) / (2.0 * h)
    return grads


def autograd_gradient(
    loss: torch.Tensor, param: torch.Tensor, flat_indices: Sequence[int]
) -> np.ndarray:
    """Autograd gradient of ``loss`` at the same probed coordinates."""
    (grad,) = torch.autograd.grad(loss, param, allow_unused=True)
    if grad is None:
        return np.zeros(len(flat_indices), dtype=np.float64)
    flat = grad.detach().reshape(-1).cpu().numpy().astype(np.float64)
    return flat[np.asarray(flat_indices, dtype=np.int64)]


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8
) -> float:
    """max |a - n| / max(|a|, |n|, floor): the floor absorbs zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def probe_indices(param: torch.Tensor, count: int, seed: int = 0) -> list[int]:
    """A deterministic sample of coordinate indices to probe."""
    n = param.numel()
    if n <= count:
        return list(range(n))
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n, size=count, replace=False).tolist())
