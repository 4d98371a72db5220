"""Central finite-difference validation of taped gradients.

The check perturbs one scalar at a time, re-evaluates the loss without a
tape, and compares (f(x+h) - f(x-h)) / 2h against the taped gradient. An
entry passes when the absolute difference or the relative difference is
below the tolerance, which tolerates near-zero gradients without hiding
real errors.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward

DEFAULT_STEP = 1e-3
EXTENDED_STEP = 1e-4
DEFAULT_TOL = 1e-2
EXTENDED_TOL = 1e-5


def finite_difference(loss_fn, param: Tensor, step: float, indices=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. selected flat entries of
    ``param`` (all entries when ``indices`` is None)."""
    flat = param.data.reshape(-1)
    indices = list(range(flat.size)) if indices is None else list(indices)
    grads = np.zeros(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        saved = flat[i]
        flat[i] = saved + step
        up = float(loss_fn())
        flat[i] = saved - step
        down = float(loss_fn())
        flat[i] = saved
        grads[n] = (up - down) / (2.0 * step)
    return grads


def hybrid_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over entries of min(absolute, relative) difference."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), diff)
    return float(np.minimum(diff, rel).max()) if diff.size else 0.0


def check_gradients(
    loss_fn,
    params: list[Tensor],
    step: float = DEFAULT_STEP,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare taped gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the computation from the current parameter
    buffers on every call. Returns the worst hybrid error over all checked
    entries.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)

    worst = 0.0
    for p in params:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        if max_entries_per_param is not None and p.size > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = gen.choice(p.size, size=max_entries_per_param, replace=False)
            idx = np.sort(idx)
        else:
            idx = np.arange(p.size)
        numeric = finite_difference(loss_fn, p, step, idx.tolist())
        worst = max(worst, hybrid_error(analytic[idx], numeric))
    return worst
