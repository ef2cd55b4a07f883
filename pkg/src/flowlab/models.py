"""Flow networks: a small pyramid teacher and a heavier refinement student.

Both models map an image pair (B, 3, H, W) to a full-resolution flow
(B, 2, H, W) and are pure functions of their parameters (no normalization
layers, no dropout, no internal randomness).

Matching in both models runs on hybrid descriptors: unit vectors that
concatenate a fixed zero-mean 5x5 patch embedding of the pooled grayscale
image with the learned features, so correlation is a blend of classical
normalized cross-correlation and feature cosine. A parameter-free argmax
readout of each correlation window (with parabola sub-cell refinement)
contributes the dominant flow estimate; the conv heads only refine it. A
freshly initialized model therefore already behaves like a pyramid NCC
matcher instead of emitting noise, which is what makes short unsupervised
schedules converge.

Teacher ("teacher-pyramid"): a 3-level siamese encoder (strides 2/4/8),
local correlation of warped descriptors (radius 3) and a small decoder per
level that emits a residual on top of the matching readout, coarse to
fine, with a final 2x upsample. Input dimensions must be divisible by 8.

Student ("student-refine"): stride-4 siamese features, one all-pairs
descriptor volume, and K shared-weight refinement iterations; each
iteration looks the volume up in a radius-6 window centered at the current
flow and feeds (correlation, context, flow) to a small conv head that
emits a delta on top of the window's matching readout. Input dimensions
must be divisible by 4. Per-pixel compute is strictly above the teacher's
(see :func:`macs_per_pixel`).

Checkpoints are a self-contained little-endian binary: magic, version,
kind, a JSON hyperparameter block, a JSON metadata block (stage,
iteration, seed, free-form extras), and the float32 parameter payload in
``named_parameters`` order. Loading rebuilds the architecture from kind +
hyper and restores parameters bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import FlowField, _tensor, resize_flow_batch, warp_backward_kw

CKPT_MAGIC = b"FLCP"
CKPT_VERSION = 1

TEACHER_KIND = "teacher-pyramid"
STUDENT_KIND = "student-refine"

DEFAULT_TEACHER_HYPER = {
    "channels": [16, 32, 32],
    "corr_radius": 3,
    "hidden": 32,
    "prior_mix": 0.8,
    "median_k": 5,
    "residual_bound": 1.0,
}
DEFAULT_STUDENT_HYPER = {
    "channels": 48,
    "stem": 32,
    "context": 32,
    "hidden": 48,
    "corr_radius": 6,
    "iters": 4,
    "prior_mix": 0.8,
    "median_k": 5,
    "residual_bound": 1.0,
}


class CheckpointError(Exception):
    """Raised for unreadable or inconsistent checkpoint files."""


class KindMismatchError(CheckpointError):
    """Raised when a checkpoint holds a different model kind than expected."""


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _act(x):
    return F.leaky_relu(x, 0.1)


def corr_local(
    a: torch.Tensor, b: torch.Tensor, radius: int, normalize: bool = True
) -> torch.Tensor:
    """Local cosine correlation between aligned descriptor maps.

    Output (B, (2r+1)^2, H, W), offsets ordered row-major (dy outer, dx
    inner), each channel the cosine similarity of ``a`` with ``b`` shifted
    by the offset (zero beyond borders). Pass ``normalize=False`` when the
    inputs are already unit vectors.
    """
    bsz, c, h, w = a.shape
    an = F.normalize(a, dim=1) if normalize else a
    bn = F.normalize(b, dim=1) if normalize else b
    pad = F.pad(bn, (radius,) * 4)
    rows = []
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            rows.append((an * pad[:, :, dy : dy + h, dx : dx + w]).sum(dim=1))
    return torch.stack(rows, dim=1)


def _patch_embed(gray: torch.Tensor, patch: int = 5) -> torch.Tensor:
    """Zero-mean patch intensities as descriptor channels, (B,1,H,W) -> (B,p^2,H,W).

    Cosine correlation of these is classical normalized cross-correlation:
    exact matching structure with no learned parameters, invariant to local
    gain and offset changes.
    """
    b, _, h, w = gray.shape
    cols = F.unfold(gray, patch, padding=patch // 2).reshape(b, patch * patch, h, w)
    return cols - cols.mean(dim=1, keepdim=True)


def _matching_descriptor(gray: torch.Tensor, feats: torch.Tensor, mix: float) -> torch.Tensor:
    """Unit descriptor blending fixed patch matching with learned features.

    cos(d1, d2) = mix^2 * NCC + (1 - mix^2) * feature-cosine; the fixed part
    makes the soft-argmax readout reliable from the first forward pass, the
    learned part lets training sharpen matching beyond it.
    """
    fixed = F.normalize(_patch_embed(gray), dim=1) * mix
    learned = F.normalize(feats, dim=1) * math.sqrt(1.0 - mix * mix)
    return torch.cat([fixed, learned], dim=1)


def match_offset(corr: torch.Tensor, radius: int, curvature_eps: float = 0.05) -> torch.Tensor:
    """Window argmax with parabola sub-cell refinement, (B,2,H,W) of (dx, dy).

    ``corr`` is (B, (2r+1)^2, H, W) in :func:`corr_local` row-major order.
    The integer offsets come from a detached argmax (piecewise constant, so
    the true derivative is zero between flips); the parabola delta stays on
    the autograd graph with its curvature floored by ``curvature_eps``,
    which bounds its gradient and damps refinement where the peak is too
    flat to localize. A softmax expectation was tried here first and loses
    most of the argmax precision to probability mass on correlated neighbor
    cells.
    """
    side = 2 * radius + 1
    idx = corr.detach().argmax(dim=1, keepdim=True)
    ix = idx % side
    iy = idx // side
    c0 = corr.gather(1, idx)
    k2 = side * side

    def refine(axis_index, step):
        cm = corr.gather(1, (idx - step).clamp(0, k2 - 1))
        cp = corr.gather(1, (idx + step).clamp(0, k2 - 1))
        # at an interior argmax cm - 2*c0 + cp <= 0, so this denominator
        # stays below -curvature_eps: smooth, sign-correct, never tiny
        delta = 0.5 * (cm - cp) / (cm - 2.0 * c0 + cp - curvature_eps)
        interior = (axis_index > 0) & (axis_index < side - 1)
        return torch.where(interior, delta.clamp(-0.5, 0.5), torch.zeros_like(delta))

    dx = (ix - radius).to(corr.dtype) + refine(ix, 1)
    dy = (iy - radius).to(corr.dtype) + refine(iy, side)
    return torch.cat([dx, dy], dim=1)


def median_filter(flow: torch.Tensor, k: int) -> torch.Tensor:
    """Channel-wise k x k median of a (B, 2, H, W) field (zero-padded edges).

    Matching readouts fail as sparse speckle (false peaks, occluded cells
    with no true match); a median replaces them with the neighborhood
    consensus while keeping motion boundaries, which is worth several EPE
    at initialization. The zero padding is deliberate: border matching is
    unobservable and its false peaks otherwise compound across refinement
    iterations (replicate padding here destabilizes the student badly).
    Gradients pass to the selected elements only.
    """
    b, c, h, w = flow.shape
    cols = F.unfold(flow.reshape(b * c, 1, h, w), k, padding=k // 2)
    return cols.median(dim=1).values.reshape(b, c, h, w)


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class _TeacherNet(nn.Module):
    def __init__(self, hyper):
        super().__init__()
        c1, c2, c3 = hyper["channels"]
        hid = hyper["hidden"]
        self.radius = hyper["corr_radius"]
        self.mix = hyper["prior_mix"]
        self.median_k = hyper["median_k"]
        self.bound = hyper["residual_bound"]
        self.enc = nn.ModuleList(
            [
                nn.ModuleList([_conv(3, c1, stride=2), _conv(c1, c1)]),
                nn.ModuleList([_conv(c1, c2, stride=2), _conv(c2, c2)]),
                nn.ModuleList([_conv(c2, c3, stride=2), _conv(c3, c3)]),
            ]
        )
        k2 = (2 * self.radius + 1) ** 2
        self.dec = nn.ModuleList(
            [
                nn.ModuleList([_conv(k2 + c + 2, hid, k=1), _conv(hid, hid), _conv(hid, 2)])
                for c in (c1, c2, c3)
            ]
        )

    def features(self, x):
        feats = []
        for stage in self.enc:
            x = _act(stage[0](x))
            x = _act(stage[1](x))
            feats.append(x)
        return feats

    def forward(self, img1, img2):
        h, w = img1.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"teacher input dimensions must be divisible by 8, got {h}x{w}")
        f1s = self.features(img1)
        f2s = self.features(img2)
        gray1 = img1.mean(dim=1, keepdim=True)
        gray2 = img2.mean(dim=1, keepdim=True)
        flow = None
        for level in (2, 1, 0):
            f1, f2 = f1s[level], f2s[level]
            g1 = F.avg_pool2d(gray1, 2 ** (level + 1))
            g2 = F.avg_pool2d(gray2, 2 ** (level + 1))
            if flow is None:
                up = torch.zeros(
                    f1.shape[0], 2, f1.shape[2], f1.shape[3], dtype=f1.dtype, device=f1.device
                )
                f2w, g2w = f2, g2
            else:
                up = resize_flow_batch(flow, f1.shape[2], f1.shape[3])
                f2w, _ = warp_backward_kw(f2, up)
                g2w, _ = warp_backward_kw(g2, up)
            d1 = _matching_descriptor(g1, f1, self.mix)
            d2 = _matching_descriptor(g2w, f2w, self.mix)
            corr = corr_local(d1, d2, self.radius, normalize=False)
            prior = match_offset(corr, self.radius)
            x = torch.cat([corr, f1, up * 0.125], dim=1)
            d0, d1, d2 = self.dec[level]
            x = _act(d0(x))
            x = _act(d1(x))
            # bounded residual: unmatchable pixels saturate instead of
            # dragging the shared weights into runaway flow growth
            res = self.bound * torch.tanh(d2(x) / self.bound)
            flow = median_filter(up + prior, self.median_k) + res
        return resize_flow_batch(flow, h, w)


class _StudentNet(nn.Module):
    def __init__(self, hyper):
        super().__init__()
        stem = hyper["stem"]
        c = hyper["channels"]
        hid = hyper["hidden"]
        ctx = hyper["context"]
        self.radius = hyper["corr_radius"]
        self.iters = hyper["iters"]
        self.mix = hyper["prior_mix"]
        self.median_k = hyper["median_k"]
        self.bound = hyper["residual_bound"]
        self.enc = nn.ModuleList(
            [_conv(3, stem, stride=2), _conv(stem, stem), _conv(stem, c, stride=2), _conv(c, c)]
        )
        self.ctx_head = _conv(c, ctx)
        k2 = (2 * self.radius + 1) ** 2
        self.update = nn.ModuleList(
            [_conv(k2 + ctx + 2, hid, k=1), _conv(hid, hid), _conv(hid, 2)]
        )

    def features(self, x):
        for i, layer in enumerate(self.enc):
            x = layer(x)
            if i < len(self.enc) - 1:
                x = _act(x)
        return x

    def forward(self, img1, img2):
        h, w = img1.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"student input dimensions must be divisible by 4, got {h}x{w}")
        f1 = self.features(img1)
        f2 = self.features(img2)
        ctx = _act(self.ctx_head(f1))
        bsz, c, h4, w4 = f1.shape
        d1 = _matching_descriptor(F.avg_pool2d(img1.mean(dim=1, keepdim=True), 4), f1, self.mix)
        d2 = _matching_descriptor(F.avg_pool2d(img2.mean(dim=1, keepdim=True), 4), f2, self.mix)
        d = d1.shape[1]
        vol = torch.bmm(
            d1.reshape(bsz, d, h4 * w4).transpose(1, 2), d2.reshape(bsz, d, h4 * w4)
        )  # (B, HW, HW) descriptor cosine similarities
        flow = torch.zeros(bsz, 2, h4, w4, dtype=f1.dtype, device=f1.device)
        for _ in range(self.iters):
            corr = _lookup(vol, flow, self.radius)
            prior = match_offset(corr, self.radius)
            x = torch.cat([corr, ctx, flow * 0.125], dim=1)
            u0, u1, u2 = self.update
            x = _act(u0(x))
            x = _act(u1(x))
            res = self.bound * torch.tanh(u2(x) / self.bound)
            flow = median_filter(flow + prior, self.median_k) + res
        return resize_flow_batch(flow, h, w)


def _lookup(vol: torch.Tensor, flow: torch.Tensor, radius: int) -> torch.Tensor:
    """Bilinear window lookup into an all-pairs volume at ``p + flow``.

    ``vol`` is (B, H*W, H*W) (source pixel x target pixel), ``flow``
    (B, 2, H, W). Returns (B, (2r+1)^2, H, W). Integer window offsets share
    one set of bilinear weights, so a single (2r+2)^2 gather plus four
    shifted blends covers the whole window. Window cells beyond the border
    clamp to border values.
    """
    bsz, _, h, w = flow.shape
    hw = h * w
    dev = flow.device
    dtype = flow.dtype
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=dev), torch.arange(w, dtype=dtype, device=dev),
        indexing="ij",
    )
    cx = (xs + flow[:, 0]).reshape(bsz, hw)
    cy = (ys + flow[:, 1]).reshape(bsz, hw)
    x0 = cx.detach().floor()
    y0 = cy.detach().floor()
    wx = (cx - x0).reshape(bsz, hw, 1, 1)
    wy = (cy - y0).reshape(bsz, hw, 1, 1)
    side = 2 * radius + 2
    offs = torch.arange(-radius, radius + 2, device=dev)
    ox = offs.view(1, 1, 1, side)
    oy = offs.view(1, 1, side, 1)
    xi = (x0.long().view(bsz, hw, 1, 1) + ox).clamp(0, w - 1)
    yi = (y0.long().view(bsz, hw, 1, 1) + oy).clamp(0, h - 1)
    idx = (yi * w + xi).reshape(bsz, hw, side * side)
    g = vol.gather(2, idx).reshape(bsz, hw, side, side)
    k = 2 * radius + 1
    top = g[:, :, :k, :k] + wx * (g[:, :, :k, 1:] - g[:, :, :k, :k])
    bot = g[:, :, 1:, :k] + wx * (g[:, :, 1:, 1:] - g[:, :, 1:, :k])
    out = top + wy * (bot - top)
    return out.reshape(bsz, h, w, k * k).permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# model wrapper, construction, prediction
# ---------------------------------------------------------------------------


@dataclass
class FlowModel:
    kind: str
    hyper: dict
    net: nn.Module

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.net.parameters()])

    def parameter_manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, tuple(p.shape)) for n, p in self.net.named_parameters()]

    def parameter_hash(self) -> str:
        vec = self.parameter_vector().to(torch.float32).numpy()
        return hashlib.sha256(vec.tobytes()).hexdigest()


def _init_params(net: nn.Module, seed: int) -> None:
    """Variance-preserving uniform init, zero biases; flow heads damped 10x.

    Gain matches leaky ReLU (slope 0.1); without normalization layers a
    plain 1/sqrt(fan_in) bound shrinks activations geometrically with depth
    and starves the correlation inputs.
    """
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1.0 + 0.1**2))
    for name, mod in net.named_modules():
        if isinstance(mod, nn.Conv2d):
            fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
            bound = math.sqrt(3.0) * gain / math.sqrt(fan_in)
            if mod.out_channels == 2:  # flow-emitting head: start near zero flow
                bound *= 0.1
            with torch.no_grad():
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.zero_()


def build_model(kind: str, seed: int = 0, hyper: dict | None = None) -> FlowModel:
    """Construct a freshly initialized model of the given kind."""
    if kind == TEACHER_KIND:
        full = {**DEFAULT_TEACHER_HYPER, **(hyper or {})}
        net = _TeacherNet(full)
    elif kind == STUDENT_KIND:
        full = {**DEFAULT_STUDENT_HYPER, **(hyper or {})}
        net = _StudentNet(full)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    _init_params(net, seed)
    net.eval()
    return FlowModel(kind=kind, hyper=full, net=net)


def predict_batch(model: FlowModel, img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
    """Grad-enabled batched forward, (B, 3, H, W) x2 -> (B, 2, H, W)."""
    return model.net(img1, img2)


def predict_bidirectional(model: FlowModel, img1: torch.Tensor, img2: torch.Tensor):
    """One stacked forward for both directions; returns (flow_f, flow_b)."""
    n = img1.shape[0]
    out = model.net(torch.cat([img1, img2]), torch.cat([img2, img1]))
    return out[:n], out[n:]


def predict(model: FlowModel, img1, img2) -> FlowField:
    """Single-pair inference without gradients."""
    i1 = _tensor(img1)
    i2 = _tensor(img2)
    if i1.dim() != 3 or i2.dim() != 3:
        raise ValueError("predict expects (C,H,W) images")
    with torch.no_grad():
        out = model.net(i1.unsqueeze(0), i2.unsqueeze(0))[0]
    return FlowField(out)


# ---------------------------------------------------------------------------
# static compute accounting
# ---------------------------------------------------------------------------


def macs_per_pixel(model_or_kind, hyper: dict | None = None, h: int = 96, w: int = 128) -> float:
    """Multiply-accumulates per full-resolution pixel for one forward pass.

    Counts convolutions, correlation products, and the student's volume
    lookup blends; warping and activations are ignored (sub-percent).
    The student's all-pairs term scales with image area, so the account is
    tied to an input size (defaults to the training canvas).
    """
    if isinstance(model_or_kind, FlowModel):
        kind, hyper = model_or_kind.kind, model_or_kind.hyper
    else:
        kind = model_or_kind
        hyper = {**(DEFAULT_TEACHER_HYPER if kind == TEACHER_KIND else DEFAULT_STUDENT_HYPER), **(hyper or {})}
    if kind == TEACHER_KIND:
        c1, c2, c3 = hyper["channels"]
        hid = hyper["hidden"]
        k2 = (2 * hyper["corr_radius"] + 1) ** 2
        enc = (
            9 * 3 * c1 / 4 + 9 * c1 * c1 / 4
            + 9 * c1 * c2 / 16 + 9 * c2 * c2 / 16
            + 9 * c2 * c3 / 64 + 9 * c3 * c3 / 64
        )
        total = 2 * enc
        for c, area in ((c3, 64), (c2, 16), (c1, 4)):
            total += k2 * (c + 25) / area  # descriptor = learned + 25 patch channels
            total += ((k2 + c + 2) * hid + 9 * hid * hid + 9 * hid * 2) / area
        return total
    if kind == STUDENT_KIND:
        stem, c, hid, ctx = hyper["stem"], hyper["channels"], hyper["hidden"], hyper["context"]
        k2 = (2 * hyper["corr_radius"] + 1) ** 2
        enc = 9 * 3 * stem / 4 + 9 * stem * stem / 4 + 9 * stem * c / 16 + 9 * c * c / 16
        total = 2 * enc + 9 * c * ctx / 16
        total += (h // 4) * (w // 4) * (c + 25) / 16  # all-pairs row per pixel
        per_iter = ((k2 + ctx + 2) * hid + 9 * hid * hid + 9 * hid * 2 + 4 * k2) / 16
        total += hyper["iters"] * per_iter
        return total
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter gradients and finite-difference checking
# ---------------------------------------------------------------------------


def parameter_gradient(model: FlowModel, closure) -> torch.Tensor:
    """Flat gradient of ``closure()`` w.r.t. the model parameters."""
    params = list(model.net.parameters())
    loss = closure()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = [
        (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for g, p in zip(grads, params)
    ]
    return torch.cat(flat)


def finite_difference_check(
    model: FlowModel,
    closure,
    n_coords: int = 3,
    h: float = 1e-4,
    seed: int = 0,
    inject_fault: bool = False,
) -> float:
    """Max relative error between autograd and central differences.

    ``closure()`` must evaluate a frozen objective (fixed data, fixed
    masks). The model should be in double precision. ``inject_fault``
    deliberately corrupts the analytic gradient; the check must then fail
    (negative control for the harness itself).
    """
    analytic = parameter_gradient(model, closure)
    if inject_fault:
        analytic = analytic + 0.01 * (analytic.abs() + 1.0)
    params = list(model.net.parameters())
    base = torch.cat([p.detach().reshape(-1).clone() for p in params])

    def load(vec):
        i = 0
        with torch.no_grad():
            for p in params:
                n = p.numel()
                p.copy_(vec[i : i + n].view_as(p))
                i += n

    gen = torch.Generator().manual_seed(seed)
    coords = torch.randint(0, base.numel(), (n_coords,), generator=gen)
    worst = 0.0
    try:
        for c in coords.tolist():
            for sign in (1.0, -1.0):
                vec = base.clone()
                vec[c] += sign * h
                load(vec)
                val = float(closure().detach())
                if sign > 0:
                    plus = val
                else:
                    minus = val
            fd = (plus - minus) / (2 * h)
            a = float(analytic[c])
            rel = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
            worst = max(worst, rel)
    finally:
        load(base)
    return worst


def zero_flow_heads(model: FlowModel) -> None:
    """Zero every flow-emitting conv so the net predicts exactly zero flow."""
    with torch.no_grad():
        for mod in model.net.modules():
            if isinstance(mod, nn.Conv2d) and mod.out_channels == 2:
                mod.weight.zero_()
                mod.bias.zero_()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: FlowModel, path, metadata: dict | None = None) -> None:
    """Write kind, hyper, metadata, and float32 parameters to ``path``."""
    meta = dict(metadata or {})
    kind_b = model.kind.encode()
    hyper_b = json.dumps(model.hyper, sort_keys=True).encode()
    meta_b = json.dumps(meta, sort_keys=True).encode()
    payload = model.parameter_vector().to(torch.float32).numpy().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IH", CKPT_VERSION, len(kind_b)))
        fh.write(kind_b)
        fh.write(struct.pack("<I", len(hyper_b)))
        fh.write(hyper_b)
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(payload) // 4))
        fh.write(payload)


def load_checkpoint(path, expect_kind: str | None = None) -> tuple[FlowModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4
    version, kind_len = struct.unpack_from("<IH", blob, pos)
    pos += 6
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    kind = blob[pos : pos + kind_len].decode()
    pos += kind_len
    if expect_kind is not None and kind != expect_kind:
        raise KindMismatchError(f"{path}: holds {kind!r}, expected {expect_kind!r}")
    (hyper_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    hyper = json.loads(blob[pos : pos + hyper_len])
    pos += hyper_len
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos : pos + meta_len])
    pos += meta_len
    (n_params,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    payload = blob[pos : pos + 4 * n_params]
    if len(payload) != 4 * n_params:
        raise CheckpointError(f"{path}: truncated parameter payload")
    model = build_model(kind, seed=0, hyper=hyper)
    vec = torch.frombuffer(bytearray(payload), dtype=torch.float32)
    expected = sum(p.numel() for p in model.net.parameters())
    if n_params != expected:
        raise CheckpointError(
            f"{path}: parameter count {n_params} does not match architecture ({expected})"
        )
    i = 0
    with torch.no_grad():
        for p in model.net.parameters():
            n = p.numel()
            p.copy_(vec[i : i + n].view_as(p))
            i += n
    return model, meta


def checkpoint_id(path) -> str:
    """Content id of a checkpoint file (first 16 hex chars of sha256)."""
    return hashlib.sha256(open(path, "rb").read()).hexdigest()[:16]
