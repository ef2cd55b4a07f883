"""Core flow types, bilinear warping, resizing, metrics, and file formats.

Tensor layout conventions used across the package:

* images:  float tensors, channels first, ``(C, H, W)`` or batched ``(B, C, H, W)``,
  values in ``[0, 1]``
* flows:   ``(2, H, W)`` or ``(B, 2, H, W)``, channel 0 is the horizontal component
  u (+x right), channel 1 is vertical v (+y down), in pixels
* masks:   ``(H, W)`` or ``(B, H, W)`` float tensors with values exactly 0 or 1

All resampling in the package goes through :func:`sample_bilinear`, which is exact
at integer coordinates (integer-coordinate lookups reproduce source values
bit-for-bit) and differentiable w.r.t. both source values and coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

FLO_MAGIC = 202021.25


class FlowIOError(Exception):
    """Raised for malformed flow/image/mask files."""


def _tensor(x) -> torch.Tensor:
    """Unwrap Image/FlowField/PixelMask wrappers to their tensor."""
    return x.data if isinstance(x, (Image, FlowField, PixelMask)) else x


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Image:
    """A single image, ``(C, H, W)`` float with C in {1, 3} and values in [0, 1]."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.dim() != 3 or d.shape[0] not in (1, 3):
            raise ValueError(f"image must be (C,H,W) with C in {{1,3}}, got {tuple(d.shape)}")
        if not d.is_floating_point():
            raise ValueError("image tensor must be floating point")
        if not torch.isfinite(d).all():
            raise ValueError("image contains non-finite values")
        if d.numel() and (d.min() < 0 or d.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def c(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_numpy_u8(cls, arr: np.ndarray) -> "Image":
        """Build from an (H, W) or (H, W, C) uint8 array."""
        if arr.dtype != np.uint8:
            raise ValueError("expected uint8 array")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        t = torch.from_numpy(np.ascontiguousarray(arr).copy()).permute(2, 0, 1).float() / 255.0
        return cls(t)

    def to_numpy_u8(self) -> np.ndarray:
        """Quantize to (H, W, C) uint8 by round-half-away scaling."""
        arr = (self.data.detach().cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
        return np.ascontiguousarray(arr.transpose(1, 2, 0))


@dataclass(frozen=True)
class FlowField:
    """A dense flow field, ``(2, H, W)`` float, finite, with a storage sanity bound."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.dim() != 3 or d.shape[0] != 2:
            raise ValueError(f"flow must be (2,H,W), got {tuple(d.shape)}")
        if not d.is_floating_point():
            raise ValueError("flow tensor must be floating point")
        if not torch.isfinite(d).all():
            raise ValueError("flow contains non-finite values")
        h, w = d.shape[1], d.shape[2]
        if d.numel() and (d[0].abs().max() >= w or d[1].abs().max() >= h):
            raise ValueError("flow magnitudes exceed field dimensions")

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PixelMask:
    """A binary mask, ``(H, W)`` float with values exactly 0 or 1."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.dim() != 2:
            raise ValueError(f"mask must be (H,W), got {tuple(d.shape)}")
        if not d.is_floating_point():
            raise ValueError("mask tensor must be floating point")
        if d.numel() and not bool(((d == 0) | (d == 1)).all()):
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]


class SampleValidity(PixelMask):
    """Marks pixels whose bilinear sample stayed inside the source canvas."""


# ---------------------------------------------------------------------------
# bilinear sampling / warping
# ---------------------------------------------------------------------------

_GRID_CACHE: dict = {}


def _base_grid(h: int, w: int, dtype, device):
    key = (h, w, dtype, device)
    g = _GRID_CACHE.get(key)
    if g is None:
        ys = torch.arange(h, dtype=dtype, device=device).view(h, 1).expand(h, w)
        xs = torch.arange(w, dtype=dtype, device=device).view(1, w).expand(h, w)
        g = (xs.contiguous(), ys.contiguous())
        _GRID_CACHE[key] = g
    return g


def sample_bilinear(src: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` (B, C, H, W) at absolute pixel coords, edge clamped.

    ``x``/``y`` have shape (B, *S) for any trailing shape S; the result is
    (B, C, *S). Coordinates outside the canvas are clamped to the border
    before interpolation. Exact at integer coordinates: the off-pixel
    weights are exactly zero, so no rounding is introduced.
    """
    b, c, h, w = src.shape
    out_shape = x.shape[1:]
    x = x.reshape(b, -1).clamp(0, w - 1)
    y = y.reshape(b, -1).clamp(0, h - 1)
    x0 = x.floor()
    y0 = y.floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0l = x0.long()
    y0l = y0.long()
    dx = (x0l + 1).clamp(max=w - 1) - x0l
    dy = ((y0l + 1).clamp(max=h - 1) - y0l) * w
    i00 = y0l * w + x0l
    flat = src.reshape(b, c, h * w)

    def take(idx):
        return flat.gather(2, idx.unsqueeze(1).expand(b, c, idx.shape[1]))

    v00 = take(i00)
    v01 = take(i00 + dx)
    v10 = take(i00 + dy)
    v11 = take(i00 + dy + dx)
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = top + wy * (bot - top)
    return out.reshape(b, c, *out_shape)


def warp_backward_kw(src: torch.Tensor, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched backward warp: result[p] = src[p + flow[p]] with edge clamping.

    ``src`` is (B, C, H, W), ``flow`` is (B, 2, H, W). Returns the warped
    tensor and a (B, H, W) validity mask that is 1 where the sample point
    lies inside the convex hull of pixel centers (0 <= x <= W-1 and
    0 <= y <= H-1), so a zero flow is valid everywhere.
    """
    b, _, h, w = src.shape
    xs, ys = _base_grid(h, w, flow.dtype, flow.device)
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]
    with torch.no_grad():
        valid = ((x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)).to(src.dtype)
    return sample_bilinear(src, x, y), valid


def warp_bilinear(src, flow) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp a single image or flow field by ``flow``: out[p] = src[p + flow[p]].

    ``src`` is (C, H, W) (an image, or a flow treated as a 2-channel field)
    and ``flow`` is (2, H, W). Returns ``(warped, validity)`` where validity
    is (H, W) with 1 marking samples taken entirely inside the canvas.
    Out-of-bounds coordinates are edge clamped, which keeps the warp
    differentiable w.r.t. both source values and flow.
    """
    src_t = _tensor(src)
    flow_t = _tensor(flow)
    if src_t.dim() != 3 or flow_t.dim() != 3 or flow_t.shape[0] != 2:
        raise ValueError("warp_bilinear expects (C,H,W) src and (2,H,W) flow")
    if src_t.shape[1:] != flow_t.shape[1:]:
        raise ValueError("src and flow spatial shapes differ")
    warped, valid = warp_backward_kw(src_t.unsqueeze(0), flow_t.unsqueeze(0))
    return warped[0], valid[0]


def resize_flow_batch(flow: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    """Batched :func:`resize_flow`: (B, 2, H, W) -> (B, 2, new_h, new_w)."""
    b, _, h, w = flow.shape
    xs, ys = _base_grid(new_h, new_w, flow.dtype, flow.device)
    x = ((xs + 0.5) * (w / new_w) - 0.5).unsqueeze(0).expand(b, -1, -1)
    y = ((ys + 0.5) * (h / new_h) - 0.5).unsqueeze(0).expand(b, -1, -1)
    out = sample_bilinear(flow, x, y)
    scale = torch.tensor([new_w / w, new_h / h], dtype=flow.dtype, device=flow.device)
    return out * scale.view(1, 2, 1, 1)


def resize_flow(flow, new_h: int, new_w: int) -> torch.Tensor:
    """Resize a (2, H, W) flow to (2, new_h, new_w), rescaling the vectors.

    Spatial resampling is bilinear under the pixel-area convention
    (x_src = (x + 0.5) * W/W' - 0.5) and vectors are multiplied by the size
    ratio (new_w/W, new_h/H), so positions and vectors share one scale
    factor and an identity resize is an exact copy.
    """
    flow_t = _tensor(flow)
    if flow_t.dim() != 3 or flow_t.shape[0] != 2:
        raise ValueError("resize_flow expects a (2,H,W) flow")
    if new_h < 2 or new_w < 2:
        raise ValueError("target dimensions must be at least 2")
    return resize_flow_batch(flow_t.unsqueeze(0), new_h, new_w)[0]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def epe(pred, gt, valid=None) -> float:
    """Mean endpoint error over valid pixels."""
    p = _tensor(pred)
    g = _tensor(gt)
    if p.shape != g.shape:
        raise ValueError("pred and gt shapes differ")
    err = torch.linalg.vector_norm(p - g, dim=-3)
    if valid is not None:
        v = _tensor(valid).to(err.dtype)
        n = v.sum()
        if n == 0:
            raise ValueError("validity mask selects no pixels")
        return float((err * v).sum() / n)
    return float(err.mean())


def fl_all(pred, gt, valid=None) -> float:
    """Percentage of valid pixels with error > 3 px and > 5% of GT magnitude."""
    p = _tensor(pred)
    g = _tensor(gt)
    if p.shape != g.shape:
        raise ValueError("pred and gt shapes differ")
    err = torch.linalg.vector_norm(p - g, dim=-3)
    mag = torch.linalg.vector_norm(g, dim=-3)
    bad = ((err > 3.0) & (err > 0.05 * mag)).to(err.dtype)
    if valid is not None:
        v = _tensor(valid).to(err.dtype)
        n = v.sum()
        if n == 0:
            raise ValueError("validity mask selects no pixels")
        return float((bad * v).sum() / n) * 100.0
    return float(bad.mean()) * 100.0


# ---------------------------------------------------------------------------
# .flo files
# ---------------------------------------------------------------------------


def write_flo(path, flow) -> None:
    """Write a flow to a little-endian .flo file (magic, W, H, interleaved u,v)."""
    f = FlowField(_tensor(flow).detach().float().cpu())  # validates shape/finite/bounds
    h, w = f.h, f.w
    hw = f.data.permute(1, 2, 0).contiguous().numpy().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(hw.tobytes())


def read_flo(path) -> torch.Tensor:
    """Read a .flo file, returning a (2, H, W) float32 tensor."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise FlowIOError(f"{path}: truncated header")
        magic, w, h = struct.unpack("<fii", head)
        if magic != FLO_MAGIC:
            raise FlowIOError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
        if w <= 0 or h <= 0:
            raise FlowIOError(f"{path}: non-positive dimensions {w}x{h}")
        payload = fh.read(w * h * 8 + 1)
    if len(payload) != w * h * 8:
        raise FlowIOError(f"{path}: payload size {len(payload)} does not match {w}x{h}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


# ---------------------------------------------------------------------------
# PPM / PGM images and masks
# ---------------------------------------------------------------------------


def _read_pnm(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(magic):
        raise FlowIOError(f"{path}: expected {magic.decode()} file")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FlowIOError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FlowIOError(f"{path}: bad header field") from exc
    if maxval != 255:
        raise FlowIOError(f"{path}: unsupported maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    raster = data[pos : pos + w * h * ch]
    if len(raster) != w * h * ch:
        raise FlowIOError(f"{path}: raster size mismatch")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, ch)


def write_image(path, image) -> None:
    """Write an Image (or (C,H,W) tensor) as binary PPM (3ch) or PGM (1ch)."""
    img = image if isinstance(image, Image) else Image(_tensor(image).detach().float().cpu())
    arr = img.to_numpy_u8()
    magic = b"P6" if img.c == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (img.w, img.h))
        fh.write(arr.tobytes())


def read_image(path) -> Image:
    """Read a binary PPM/PGM file into an Image."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic not in (b"P6", b"P5"):
        raise FlowIOError(f"{path}: not a binary PPM/PGM file")
    return Image.from_numpy_u8(_read_pnm(path, magic).squeeze(-1) if magic == b"P5" else _read_pnm(path, magic))


def write_mask(path, mask) -> None:
    """Write a binary mask as PGM with values {0, 255}."""
    m = mask if isinstance(mask, PixelMask) else PixelMask(_tensor(mask).detach().float().cpu())
    arr = (m.data.numpy() * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (m.w, m.h))
        fh.write(arr.tobytes())


def read_mask(path) -> torch.Tensor:
    """Read a {0,255} PGM mask, returning an (H, W) float tensor of 0/1."""
    arr = _read_pnm(path, b"P5").squeeze(-1)
    if not np.isin(arr, (0, 255)).all():
        raise FlowIOError(f"{path}: mask values must be 0 or 255")
    return torch.from_numpy((arr == 255).astype(np.float32))


# ---------------------------------------------------------------------------
# flow visualization
# ---------------------------------------------------------------------------


def flow_to_color(flow, max_norm: float | None = None) -> torch.Tensor:
    """Color-wheel rendering of a flow field, returned as a (3, H, W) image.

    Hue encodes atan2(v, u), saturation the magnitude relative to
    ``max_norm`` (default: the field's maximum magnitude), value is 1, so
    zero flow renders white.
    """
    f = _tensor(flow).detach().float()
    if f.dim() != 3 or f.shape[0] != 2:
        raise ValueError("flow_to_color expects a (2,H,W) flow")
    u, v = f[0], f[1]
    mag = torch.sqrt(u * u + v * v)
    if max_norm is None:
        max_norm = float(mag.max())
    if max_norm <= 0:
        max_norm = 1.0
    hue = (torch.atan2(v, u) / (2 * torch.pi)) % 1.0
    sat = (mag / max_norm).clamp(0, 1)
    # standard HSV -> RGB with V=1
    k = (hue * 6.0) % 6.0
    i = k.floor()
    frac = k - i
    p = 1 - sat
    q = 1 - sat * frac
    t = 1 - sat * (1 - frac)
    one = torch.ones_like(sat)
    rgb_by_sector = [
        (one, t, p),
        (q, one, p),
        (p, one, t),
        (p, q, one),
        (t, p, one),
        (one, p, q),
    ]
    out = torch.zeros(3, f.shape[1], f.shape[2])
    for sector, (r, g, b) in enumerate(rgb_by_sector):
        sel = (i == sector).float()
        out[0] += sel * r
        out[1] += sel * g
        out[2] += sel * b
    return out.clamp(0, 1)
