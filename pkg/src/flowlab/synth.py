"""Synthetic layered scenes with exact flow and occlusion ground truth.

A scene is a band-limited noise background plus a few convex sprites
(ellipses and regular polygons), each moving by its own similarity
transform (translation, small rotation, mild scaling); the background only
translates. Frame 2 is rendered analytically and quantized to 8 bits.
Frame 1 is then built so the data exactly honors its own ground truth: at
every non-occluded pixel, frame 1 is the bilinearly warped (and
requantized) frame 2 at ``p + F_f(p)``, so the forward warp residual is
pure quantization noise (median about 1/1020). Occluded pixels are
rendered from the frame-1 layer arrangement instead.

Occlusion ground truth follows the layer model: a frame-1 pixel is
occluded when its target leaves the canvas hull or a strictly higher layer
covers the target in frame 2 (symmetric for the backward direction).
Scenes whose occlusion fraction falls outside [1%, 30%] are redrawn.

Photometric perturbation (gamma, brightness, pixel noise) applies to frame
2 only, after frame 1 has been derived, so it acts like an illumination
change between the frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import (
    FlowField,
    Image,
    PixelMask,
    read_flo,
    read_image,
    read_mask,
    write_flo,
    write_image,
    write_mask,
)

GENERATOR_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    """Scene sampling ranges; defaults give the desk-scale corpus."""

    height: int = 96
    width: int = 128
    sprites_min: int = 2
    sprites_max: int = 6
    max_translation: float = 8.0
    max_rotation_deg: float = 5.0
    scale_min: float = 0.95
    scale_max: float = 1.05
    bg_translation_min: float = 1.0  # lower bound keeps some occlusion in every scene
    bg_translation_max: float = 4.0
    gamma_min: float = 0.8
    gamma_max: float = 1.2
    brightness_max: float = 0.1
    # census comparisons flip sign under noise comparable to local intensity
    # differences; keep the noise an order below typical texture contrast so
    # photometric alignment stays observable at sub-pixel scales
    noise_sigma_max: float = 0.005
    occlusion_min: float = 0.01
    occlusion_max: float = 0.30

    @classmethod
    def plain(cls, **kw) -> "SceneSpec":
        """Spec with the frame-2 photometric perturbation collapsed to identity."""
        return cls(gamma_min=1.0, gamma_max=1.0, brightness_max=0.0, noise_sigma_max=0.0, **kw)


@dataclass
class AffineMotion:
    """Similarity motion about a center: p -> scale*R(p - c) + c + t."""

    center: np.ndarray
    translation: np.ndarray
    rotation_deg: float = 0.0
    scale: float = 1.0

    def _rot(self, inverse=False):
        th = np.deg2rad(self.rotation_deg) * (-1 if inverse else 1)
        c, s = np.cos(th), np.sin(th)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center.reshape(2, *([1] * (pts.ndim - 1)))
        m = self._rot() * self.scale
        out = np.einsum("ij,j...->i...", m, d)
        return out + (self.center + self.translation).reshape(2, *([1] * (pts.ndim - 1)))

    def invert(self, pts: np.ndarray) -> np.ndarray:
        d = pts - (self.center + self.translation).reshape(2, *([1] * (pts.ndim - 1)))
        m = self._rot(inverse=True) / self.scale
        out = np.einsum("ij,j...->i...", m, d)
        return out + self.center.reshape(2, *([1] * (pts.ndim - 1)))


@dataclass
class ValueNoise:
    """Band-limited noise field evaluable at continuous coordinates.

    Octaves of bilinearly interpolated random lattices. Unlike a sparse
    Fourier sum, the autocorrelation decays monotonically past one lattice
    spacing, so patch matching has no periodic false minima.
    """

    lattices: tuple  # per octave, (Hs, Ws) float arrays
    spacings: np.ndarray  # per octave, pixels per lattice cell
    amps: np.ndarray  # per octave
    base: np.ndarray  # (3,) per-channel level
    gains: np.ndarray  # (3,) per-channel weight of the shared pattern
    margin: float = 32.0  # lattice origin offset; keeps off-canvas coords in range

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """pts (2, ...) -> colors (3, ...) in [0.02, 0.98]."""
        tail = [1] * (pts.ndim - 1)
        pattern = np.zeros(pts.shape[1:])
        for lat, s, a in zip(self.lattices, self.spacings, self.amps):
            u = (pts[0] + self.margin) / s
            v = (pts[1] + self.margin) / s
            j0 = np.clip(np.floor(u).astype(int), 0, lat.shape[1] - 2)
            i0 = np.clip(np.floor(v).astype(int), 0, lat.shape[0] - 2)
            fu = np.clip(u - j0, 0.0, 1.0)
            fv = np.clip(v - i0, 0.0, 1.0)
            top = lat[i0, j0] * (1 - fu) + lat[i0, j0 + 1] * fu
            bot = lat[i0 + 1, j0] * (1 - fu) + lat[i0 + 1, j0 + 1] * fu
            pattern += a * (2.0 * (top * (1 - fv) + bot * fv) - 1.0)
        out = self.base.reshape(3, *tail) + self.gains.reshape(3, *tail) * pattern
        return np.clip(out, 0.02, 0.98)


def _make_texture(rng: np.random.Generator, h: int = 96, w: int = 128) -> ValueNoise:
    # six octaves with 1/f amplitudes approximate natural-image statistics:
    # the autocorrelation then has a single broad peak (no quasi-periodic
    # side bumps to trap patch matching) and structure at every scale breaks
    # the aperture ambiguity a locally planar pattern would have; overall
    # contrast stays moderate so the edge-aware smoothness weight survives
    spacings = np.array([40.0, 27.0, 18.0, 12.0, 8.0, 5.3]) * rng.uniform(0.9, 1.1, size=6)
    amps = spacings / spacings.sum()
    margin = 32.0
    lattices = tuple(
        rng.uniform(0.0, 1.0, size=(int(np.ceil((h + 2 * margin) / s)) + 2, int(np.ceil((w + 2 * margin) / s)) + 2))
        for s in spacings
    )
    return ValueNoise(
        lattices=lattices,
        spacings=spacings,
        amps=amps,
        base=rng.uniform(0.3, 0.7, size=3),
        gains=rng.uniform(0.45, 0.65, size=3),
        margin=margin,
    )


@dataclass
class Sprite:
    """A convex moving layer: an ellipse or a regular polygon."""

    kind: str  # "ellipse" | "polygon"
    motion: AffineMotion
    texture: ValueNoise
    center: np.ndarray
    axes: np.ndarray | None = None  # ellipse (a, b)
    angle: float = 0.0  # ellipse orientation
    vertices: np.ndarray | None = None  # polygon (K, 2), counter-clockwise

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Membership of frame-1 material coordinates, pts (2, ...)."""
        if self.kind == "ellipse":
            d = pts - self.center.reshape(2, *([1] * (pts.ndim - 1)))
            c, s = np.cos(self.angle), np.sin(self.angle)
            xr = c * d[0] + s * d[1]
            yr = -s * d[0] + c * d[1]
            return (xr / self.axes[0]) ** 2 + (yr / self.axes[1]) ** 2 <= 1.0
        inside = np.ones(pts.shape[1:], dtype=bool)
        k = len(self.vertices)
        for i in range(k):
            a = self.vertices[i]
            b = self.vertices[(i + 1) % k]
            e = b - a
            rel_x = pts[0] - a[0]
            rel_y = pts[1] - a[1]
            inside &= e[0] * rel_y - e[1] * rel_x >= 0.0
        return inside

    def contains_frame2(self, pts: np.ndarray) -> np.ndarray:
        return self.contains(self.motion.invert(pts))


def _make_sprite(rng: np.random.Generator, spec: SceneSpec) -> Sprite:
    center = np.array(
        [rng.uniform(0.15, 0.85) * spec.width, rng.uniform(0.15, 0.85) * spec.height]
    )
    motion = AffineMotion(
        center=center,
        translation=rng.uniform(-spec.max_translation, spec.max_translation, size=2),
        rotation_deg=rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg),
        scale=rng.uniform(spec.scale_min, spec.scale_max),
    )
    texture = _make_texture(rng, spec.height, spec.width)
    if rng.uniform() < 0.5:
        return Sprite(
            kind="ellipse",
            motion=motion,
            texture=texture,
            center=center,
            axes=rng.uniform(8.0, 20.0, size=2),
            angle=rng.uniform(0, np.pi),
        )
    k = int(rng.integers(3, 7))
    radius = rng.uniform(8.0, 20.0)
    base = rng.uniform(0, 2 * np.pi)
    ang = base + np.arange(k) * (2 * np.pi / k)
    vertices = center[None, :] + radius * np.stack([np.cos(ang), np.sin(ang)], 1)
    return Sprite(kind="polygon", motion=motion, texture=texture, center=center, vertices=vertices)


def _grid(h: int, w: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([xs, ys])


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _bilinear_u8(img_u8: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample (H, W, 3) uint8 at pts (2, H, W), edge clamped, float in [0,1]."""
    h, w = img_u8.shape[:2]
    x = np.clip(pts[0], 0, w - 1)
    y = np.clip(pts[1], 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    img = img_u8.astype(np.float64) / 255.0
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def render_pair(sprites, bg_texture: ValueNoise, bg_motion: AffineMotion, h: int, w: int):
    """Render one scene into images, flows, and occlusion masks.

    Sprites are ordered back to front (later entries occlude earlier ones);
    the background sits below all sprites. Returns
    ``(i1_u8, i2_u8, flow_f, flow_b, occ_f, occ_b)`` with images (H, W, 3)
    uint8 (frame 2 pre-perturbation), flows (2, H, W) float64, masks (H, W)
    uint8 in {0, 1}.
    """
    pts = _grid(h, w)
    n = len(sprites)

    member1 = [s.contains(pts) for s in sprites]
    member2 = [s.contains_frame2(pts) for s in sprites]

    # topmost layer ids; -1 is the background
    layer1 = np.full((h, w), -1, dtype=int)
    layer2 = np.full((h, w), -1, dtype=int)
    for i in range(n):
        layer1[member1[i]] = i
        layer2[member2[i]] = i

    flow_f = bg_motion.apply(pts) - pts
    flow_b = bg_motion.invert(pts) - pts
    for i, s in enumerate(sprites):
        fwd = s.motion.apply(pts) - pts
        bwd = s.motion.invert(pts) - pts
        flow_f = np.where(layer1 == i, fwd, flow_f)
        flow_b = np.where(layer2 == i, bwd, flow_b)

    def occlusion(flow, layer, cover):
        target = pts + flow
        occ = (target[0] < 0) | (target[0] > w - 1) | (target[1] < 0) | (target[1] > h - 1)
        # walk layers top-down; a layer-l pixel is hidden when a sprite with
        # z > l covers its target in the other frame
        above = np.zeros((h, w), dtype=bool)
        for lvl in range(n - 1, -2, -1):
            occ |= (layer == lvl) & above
            if lvl >= 0:
                above = above | cover(lvl, target)
        return occ

    occ_f = occlusion(flow_f, layer1, lambda i, t: sprites[i].contains_frame2(t))
    occ_b = occlusion(flow_b, layer2, lambda i, t: sprites[i].contains(t))

    # frame 2: analytic render, then quantize
    i2 = bg_texture.sample(bg_motion.invert(pts))
    for i, s in enumerate(sprites):
        i2 = np.where(member2[i][None], s.texture.sample(s.motion.invert(pts)), i2)
    i2_u8 = _quantize(np.moveaxis(i2, 0, -1))

    # frame 1: warp of quantized frame 2 where visible, analytic where occluded
    warped = _bilinear_u8(i2_u8, pts + flow_f)
    analytic = bg_texture.sample(pts)
    for i, s in enumerate(sprites):
        analytic = np.where(member1[i][None], s.texture.sample(pts), analytic)
    i1 = np.where(occ_f[..., None], np.moveaxis(analytic, 0, -1), warped)
    i1_u8 = _quantize(i1)

    return i1_u8, i2_u8, flow_f, flow_b, occ_f.astype(np.uint8), occ_b.astype(np.uint8)


def _perturb_frame2(i2_u8: np.ndarray, rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    img = i2_u8.astype(np.float64) / 255.0
    gamma = rng.uniform(spec.gamma_min, spec.gamma_max)
    brightness = rng.uniform(-spec.brightness_max, spec.brightness_max)
    sigma = rng.uniform(0.0, spec.noise_sigma_max)
    out = img**gamma + brightness
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=img.shape)
    return _quantize(np.clip(out, 0.0, 1.0))


def _draw_scene(rng: np.random.Generator, spec: SceneSpec):
    n = int(rng.integers(spec.sprites_min, spec.sprites_max + 1))
    sprites = [_make_sprite(rng, spec) for _ in range(n)]
    bg_mag = rng.uniform(spec.bg_translation_min, spec.bg_translation_max, size=2)
    bg_sign = rng.choice([-1.0, 1.0], size=2)
    bg_motion = AffineMotion(center=np.zeros(2), translation=bg_mag * bg_sign)
    return sprites, _make_texture(rng, spec.height, spec.width), bg_motion


def generate_pair(rng: np.random.Generator, spec: SceneSpec, max_attempts: int = 20):
    """Draw scenes until the occlusion-fraction invariant holds, then render."""
    for _ in range(max_attempts):
        sprites, bg_texture, bg_motion = _draw_scene(rng, spec)
        i1, i2, flow_f, flow_b, occ_f, occ_b = render_pair(
            sprites, bg_texture, bg_motion, spec.height, spec.width
        )
        frac = occ_f.mean()
        if spec.occlusion_min <= frac <= spec.occlusion_max:
            return i1, _perturb_frame2(i2, rng, spec), flow_f, flow_b, occ_f, occ_b
    raise RuntimeError("could not draw a scene meeting the occlusion-fraction bounds")


def generate_dataset(
    out_dir, n_pairs: int, seed: int, spec: SceneSpec = SceneSpec(), write_gt: bool = True
) -> Path:
    """Write ``n_pairs`` scene pairs under ``out_dir``; returns that directory.

    Layout is flat: ``NNNN_img1.ppm``, ``NNNN_img2.ppm``, ``NNNN_flow_f.flo``,
    ``NNNN_flow_b.flo``, ``NNNN_occ_f.pgm``, ``NNNN_occ_b.pgm`` plus a
    ``meta.txt``. Fully determined by ``seed`` (per-pair generators are
    seeded with ``[seed, index]``).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        i1, i2, flow_f, flow_b, occ_f, occ_b = generate_pair(rng, spec)
        write_image(root / f"{i:04d}_img1.ppm", Image.from_numpy_u8(i1))
        write_image(root / f"{i:04d}_img2.ppm", Image.from_numpy_u8(i2))
        if write_gt:
            write_flo(root / f"{i:04d}_flow_f.flo", torch.from_numpy(flow_f).float())
            write_flo(root / f"{i:04d}_flow_b.flo", torch.from_numpy(flow_b).float())
            write_mask(root / f"{i:04d}_occ_f.pgm", torch.from_numpy(occ_f.astype(np.float32)))
            write_mask(root / f"{i:04d}_occ_b.pgm", torch.from_numpy(occ_b.astype(np.float32)))
    meta = {
        "pairs": n_pairs,
        "width": spec.width,
        "height": spec.height,
        "seed": seed,
        "generator_version": GENERATOR_VERSION,
        "labeled": int(write_gt),
    }
    with open(root / "meta.txt", "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k} = {v}\n")
    return root


class SceneDataset:
    """Read access to a generated corpus; ground truth is optional.

    Training-side accessors (:meth:`load_images`) never touch ground-truth
    files, so a corpus with deleted GT remains fully trainable; evaluation
    accessors raise a clear error instead.
    """

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.txt"
        if not meta_path.exists():
            raise FileNotFoundError(f"{self.root}: not a dataset (missing meta.txt)")
        self.meta = {}
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                self.meta[k.strip()] = v.strip()
        self.n = int(self.meta["pairs"])
        self.height = int(self.meta["height"])
        self.width = int(self.meta["width"])

    def __len__(self) -> int:
        return self.n

    def path(self, i: int, name: str) -> Path:
        """File path of one pair component, e.g. ``path(3, "img1.ppm")``."""
        if not 0 <= i < self.n:
            raise IndexError(f"pair index {i} out of range [0, {self.n})")
        return self.root / f"{i:04d}_{name}"

    @property
    def has_ground_truth(self) -> bool:
        return self.n > 0 and self.path(0, "flow_f.flo").exists()

    def load_images(self, i: int) -> tuple[Image, Image]:
        return read_image(self.path(i, "img1.ppm")), read_image(self.path(i, "img2.ppm"))

    def load_gt(self, i: int):
        """(flow_f, flow_b, occ_f, occ_b); raises if the corpus is unlabeled."""
        if not self.path(i, "flow_f.flo").exists():
            raise FileNotFoundError(
                f"{self.path(i, 'flow_f.flo')}: no ground truth stored (unlabeled corpus); "
                "evaluation is unavailable"
            )
        return (
            FlowField(read_flo(self.path(i, "flow_f.flo"))),
            FlowField(read_flo(self.path(i, "flow_b.flo"))),
            PixelMask(read_mask(self.path(i, "occ_f.pgm"))),
            PixelMask(read_mask(self.path(i, "occ_b.pgm"))),
        )
