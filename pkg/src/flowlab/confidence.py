"""Residual-based confidence: threshold calibration and reliable pixel masks.

The reliability rule keeps a pixel when it is non-occluded and its census
residual does not exceed a threshold tau. tau is calibrated from pooled
residuals so that a requested fraction (the removal rate) of the pooled
pixels falls above it: with N pooled values sorted ascending, tau is the
k-th smallest with ``k = N - floor(rr * N)``. A removal rate of 0 keeps
everything (tau = pooled max); ties at tau are kept, so with duplicated
values the realized removal can be smaller than requested.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import torch

from .core import _tensor


def _pool(fields, masks=None) -> torch.Tensor:
    if isinstance(fields, torch.Tensor):
        fields = [fields]
    if masks is not None and isinstance(masks, torch.Tensor):
        masks = [masks]
    if masks is not None and len(masks) != len(fields):
        raise ValueError("fields and masks counts differ")
    chunks = []
    for i, f in enumerate(fields):
        t = _tensor(f).reshape(-1)
        if masks is not None:
            m = _tensor(masks[i]).reshape(-1)
            if m.shape != t.shape:
                raise ValueError("field and mask shapes differ")
            t = t[m > 0]
        chunks.append(t)
    return torch.cat(chunks) if chunks else torch.empty(0)


def calibrate_threshold(residuals, non_occluded=None, removal_rate: float = 0.0) -> float:
    """Threshold below which a pooled residual counts as reliable.

    ``residuals`` is a field or sequence of fields; ``non_occluded``
    restricts pooling to mask-1 pixels. ``removal_rate`` in [0, 1): the
    returned tau is the (N - floor(rr*N))-th smallest pooled value.
    """
    if not 0.0 <= removal_rate < 1.0:
        raise ValueError("removal_rate must lie in [0, 1)")
    pool = _pool(residuals, non_occluded)
    n = pool.numel()
    if n == 0:
        raise ValueError("no residuals to calibrate on")
    k = n - math.floor(removal_rate * n)
    return float(pool.kthvalue(k).values)


def reliable_mask(residual, non_occluded, tau: float) -> torch.Tensor:
    """Binary mask: non-occluded pixels whose residual is at most tau."""
    r = _tensor(residual)
    m = _tensor(non_occluded)
    if r.shape != m.shape:
        raise ValueError("residual and mask shapes differ")
    return ((r <= tau) & (m > 0)).to(r.dtype)


def sparsification_curve(
    epe_fields,
    residual_fields,
    valid_masks=None,
    rr_grid: Sequence[float] = (0.0, 0.1, 0.2, 0.3),
) -> list[tuple[float, float, float]]:
    """Retained-set EPE as progressively less confident pixels are removed.

    Pools per-pixel EPE and residual values over the given fields (restricted
    to ``valid_masks``), then for each removal rate recalibrates tau on the
    same pool and reports ``(rr, mean EPE of retained pixels, retained
    fraction)``. Rows come back in the order of ``rr_grid``.
    """
    epes = _pool(epe_fields, valid_masks)
    res = _pool(residual_fields, valid_masks)
    if epes.shape != res.shape:
        raise ValueError("EPE and residual pools differ in size")
    n = res.numel()
    if n == 0:
        raise ValueError("nothing to pool")
    rows = []
    for rr in rr_grid:
        if not 0.0 <= rr < 1.0:
            raise ValueError("removal rates must lie in [0, 1)")
        k = n - math.floor(rr * n)
        tau = res.kthvalue(k).values
        keep = res <= tau
        rows.append((float(rr), float(epes[keep].mean()), float(keep.sum()) / n))
    return rows
