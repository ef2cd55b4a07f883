"""Photometric census loss, edge-aware smoothness, and occlusion reasoning.

The photometric measure compares census descriptors of the reference image
and the flow-warped counterpart: per pixel, a 7x7 neighborhood of grayscale
intensities (scaled to [0, 255]) is reduced to soft signs
``n / sqrt(scale^2 + n^2)`` of center differences, descriptor distance is a
soft Hamming sum ``d^2 / (thresh + d^2)`` over the window, and the result is
passed through the robust penalty ``rho(x) = (|x| + eps)^q``. With the
defaults (eps=0.01, q=0.4) identical inputs give the floor
``rho(0) = 0.01^0.4`` at every pixel, so the two-direction photometric loss
bottoms out at ``2 * rho(0)``, not at zero.

All losses here are plain functions of tensors; occlusion and validity
masks are computed without gradient and treated as constants by callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import _tensor, warp_backward_kw

CENSUS_EPS = 0.01
CENSUS_Q = 0.4
RHO0 = CENSUS_EPS**CENSUS_Q  # penalty floor for identical inputs


@dataclass(frozen=True)
class CensusParams:
    """Knobs of the census comparison; defaults match the trained pipeline."""

    window: int = 7
    soft_scale: float = 0.1
    hamming_thresh: float = 0.1
    eps: float = CENSUS_EPS
    q: float = CENSUS_Q

    def __post_init__(self):
        if self.window % 2 != 1 or self.window < 1:
            raise ValueError("census window must be odd and positive")


def robust_penalty(x: torch.Tensor, eps: float = CENSUS_EPS, q: float = CENSUS_Q) -> torch.Tensor:
    """Generalized Charbonnier-style penalty (|x| + eps)^q."""
    return (x.abs() + eps) ** q


def _grayscale255(img: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) image in [0,1] -> (B, 1, H, W) channel-mean scaled to [0,255]."""
    return img.mean(dim=1, keepdim=True) * 255.0


def census_descriptor(img: torch.Tensor, params: CensusParams = CensusParams()) -> torch.Tensor:
    """Soft census descriptor stack, (B, K*K, H, W) for a K-wide window.

    Uses replicate padding so every pixel, including borders, has a full
    window; border descriptors therefore stay invariant to intensity
    offsets just like interior ones.
    """
    g = _grayscale255(img)
    k = params.window
    pad = k // 2
    patches = F.unfold(F.pad(g, (pad, pad, pad, pad), mode="replicate"), k)
    b, _, hw = patches.shape
    patches = patches.view(b, k * k, g.shape[2], g.shape[3])
    n = patches - g
    return n / torch.sqrt(params.soft_scale**2 + n * n)


def soft_hamming(desc_a: torch.Tensor, desc_b: torch.Tensor, thresh: float = 0.1) -> torch.Tensor:
    """Soft Hamming distance between descriptor stacks, (B, H, W)."""
    d2 = (desc_a - desc_b) ** 2
    return (d2 / (thresh + d2)).sum(dim=1)


def census_residual_map(
    img_a: torch.Tensor,
    img_b: torch.Tensor,
    params: CensusParams = CensusParams(),
    desc_a: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-pixel robust census residual rho(hamming) between two aligned images.

    (B, C, H, W) inputs, (B, H, W) output. ``desc_a`` optionally supplies a
    precomputed descriptor for ``img_a`` (useful when the reference side
    carries no gradient and is reused across steps).
    """
    if desc_a is None:
        desc_a = census_descriptor(img_a, params)
    desc_b = census_descriptor(img_b, params)
    ham = soft_hamming(desc_a, desc_b, params.hamming_thresh)
    # hamming is nonnegative, so the penalty needs no abs; this keeps the
    # gradient exact at zero distance
    return (ham + params.eps) ** params.q


def census_residual(img_a, img_b, params: CensusParams = CensusParams()) -> torch.Tensor:
    """Single-pair census residual, (C, H, W) inputs -> (H, W)."""
    a = _tensor(img_a)
    b = _tensor(img_b)
    if a.shape != b.shape:
        raise ValueError("census_residual expects equal-shaped images")
    return census_residual_map(a.unsqueeze(0), b.unsqueeze(0), params)[0]


# ---------------------------------------------------------------------------
# photometric loss
# ---------------------------------------------------------------------------


def photometric_loss_batch(
    img1: torch.Tensor,
    img2: torch.Tensor,
    flow_f: torch.Tensor,
    flow_b: torch.Tensor,
    nonocc_f: torch.Tensor,
    nonocc_b: torch.Tensor,
    params: CensusParams = CensusParams(),
    desc1: torch.Tensor | None = None,
    desc2: torch.Tensor | None = None,
) -> torch.Tensor:
    """Occlusion-gated census loss over both directions, batched.

    Each direction is a weighted mean of per-pixel census residuals between
    the reference image and the warped other frame, with weights
    ``non-occluded AND sample-valid`` (weights enter as constants). The two
    direction means are summed, then averaged over the batch. Raises if a
    sample has no usable pixel in some direction.
    """
    w2, valid_f = warp_backward_kw(img2, flow_f)
    w1, valid_b = warp_backward_kw(img1, flow_b)
    res_f = census_residual_map(img1, w2, params, desc_a=desc1)
    res_b = census_residual_map(img2, w1, params, desc_a=desc2)
    with torch.no_grad():
        wt_f = nonocc_f * valid_f
        wt_b = nonocc_b * valid_b
        nf = wt_f.sum(dim=(1, 2))
        nb = wt_b.sum(dim=(1, 2))
        if (nf == 0).any() or (nb == 0).any():
            raise ValueError("photometric loss has no valid pixels in some direction")
    loss_f = (res_f * wt_f).sum(dim=(1, 2)) / nf
    loss_b = (res_b * wt_b).sum(dim=(1, 2)) / nb
    return (loss_f + loss_b).mean()


def loss_photometric(
    img1, img2, flow_f, flow_b, nonocc_f, nonocc_b, params: CensusParams = CensusParams()
) -> torch.Tensor:
    """Single-pair form of :func:`photometric_loss_batch` ((C,H,W)/(2,H,W)/(H,W))."""
    return photometric_loss_batch(
        _tensor(img1).unsqueeze(0),
        _tensor(img2).unsqueeze(0),
        _tensor(flow_f).unsqueeze(0),
        _tensor(flow_b).unsqueeze(0),
        _tensor(nonocc_f).unsqueeze(0),
        _tensor(nonocc_b).unsqueeze(0),
        params,
    )


# ---------------------------------------------------------------------------
# smoothness loss
# ---------------------------------------------------------------------------


def _kth_diff(t: torch.Tensor, dim: int, order: int) -> torch.Tensor:
    for _ in range(order):
        t = t.narrow(dim, 1, t.shape[dim] - 1) - t.narrow(dim, 0, t.shape[dim] - 1)
    return t


def smoothness_loss_batch(
    flow: torch.Tensor,
    ref_img: torch.Tensor,
    order: int = 1,
    edge_lambda: float = 150.0,
) -> torch.Tensor:
    """Edge-aware k-th order smoothness of a flow, batched, scalar result.

    For each axis the k-th forward difference of both flow components
    (absolute values summed) is weighted by ``exp(-edge_lambda * |dI|)``
    where ``dI`` is the channel-mean first difference of the reference
    image at the stencil's leading pixel. Each axis term is a mean over
    the positions where the full stencil fits (boundary rows/columns are
    excluded, not padded), the two axis means are added, and the batch is
    averaged.
    """
    if order not in (1, 2):
        raise ValueError("smoothness order must be 1 or 2")
    total = 0.0
    for dim in (2, 3):  # y, x
        fd = _kth_diff(flow, dim, order).abs().sum(dim=1)
        ig = _kth_diff(ref_img, dim, 1).abs().mean(dim=1)
        ig = ig.narrow(dim - 1, 0, fd.shape[dim - 1])
        weight = torch.exp(-edge_lambda * ig)
        total = total + (fd * weight).mean(dim=(1, 2))
    return total.mean()


def loss_smoothness(flow, ref_img, order: int = 1, edge_lambda: float = 150.0) -> torch.Tensor:
    """Single-pair form of :func:`smoothness_loss_batch`."""
    return smoothness_loss_batch(
        _tensor(flow).unsqueeze(0), _tensor(ref_img).unsqueeze(0), order, edge_lambda
    )


# ---------------------------------------------------------------------------
# occlusion via forward-backward consistency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OcclusionParams:
    alpha1: float = 0.01
    alpha2: float = 0.5


def occlusion_masks_batch(
    flow_f: torch.Tensor,
    flow_b: torch.Tensor,
    params: OcclusionParams = OcclusionParams(),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward-backward consistency occlusion masks, (B, H, W) each, no grad.

    A pixel is occluded when ``|F_f + F_b(p + F_f)|^2`` exceeds
    ``alpha1 * (|F_f|^2 + |F_b(p + F_f)|^2) + alpha2``; symmetric for the
    backward mask. Always computed without gradient.
    """
    with torch.no_grad():
        fb_w, _ = warp_backward_kw(flow_b, flow_f)
        ff_w, _ = warp_backward_kw(flow_f, flow_b)
        occ_f = _fb_violation(flow_f, fb_w, params)
        occ_b = _fb_violation(flow_b, ff_w, params)
    return occ_f, occ_b


def _fb_violation(fa: torch.Tensor, fb_warped: torch.Tensor, params: OcclusionParams) -> torch.Tensor:
    s = fa + fb_warped
    lhs = (s * s).sum(dim=1)
    rhs = params.alpha1 * ((fa * fa).sum(dim=1) + (fb_warped * fb_warped).sum(dim=1)) + params.alpha2
    return (lhs > rhs).to(fa.dtype)


def occlusion_masks(flow_f, flow_b, params: OcclusionParams = OcclusionParams()):
    """Single-pair occlusion masks ((2,H,W) flows -> two (H,W) masks)."""
    of, ob = occlusion_masks_batch(
        _tensor(flow_f).unsqueeze(0), _tensor(flow_b).unsqueeze(0), params
    )
    return of[0], ob[0]


def photometric_floor() -> float:
    """Loss value of the two-direction census loss on identical, aligned frames."""
    return 2.0 * RHO0


def max_census_residual(params: CensusParams = CensusParams()) -> float:
    """Upper bound of the per-pixel residual: all window cells maximally distinct."""
    k2 = params.window**2
    # soft sign range is (-1, 1); opposite saturated signs give d^2 = 4
    return (k2 * 4.0 / (params.hamming_thresh + 4.0) + params.eps) ** params.q
