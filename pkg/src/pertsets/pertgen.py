"""Perturbation-pair generation: noise and geometric transforms over image
corpora, IDX file parsing, and a synthetic shape generator used when no real
corpus is available.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .cvae import PairSet


@dataclass
class Dataset:
    """Image corpus: (N, H, W) float32 pixels in [0, 1], optional int labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (N, H, W), got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError("labels length does not match images")

    def __len__(self):
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# l-infinity noise pairs


def gen_linf_pairs(data: Dataset, eps: float, rng: np.random.Generator,
                   pairing: str = "centered") -> PairSet:
    """Pairs whose perturbed member adds uniform noise in [-eps, eps] per
    pixel, clamped back to [0, 1].

    pairing "centered": conditioned member is the clean image. pairing
    "perturbed_only": the conditioned member is itself an independent noisy
    draw, for corpora where no clean examples exist.
    """
    if eps <= 0:
        raise ValueError(f"noise radius must be positive, got {eps}")
    n, h, w = data.images.shape
    flat = data.images.reshape(n, h * w)
    noisy = np.clip(flat + rng.uniform(-eps, eps, size=flat.shape).astype(np.float32), 0.0, 1.0)
    if pairing == "centered":
        cond = flat.copy()
    elif pairing == "perturbed_only":
        cond = np.clip(flat + rng.uniform(-eps, eps, size=flat.shape).astype(np.float32), 0.0, 1.0)
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    return PairSet(noisy, cond, data.labels)


# ---------------------------------------------------------------------------
# Rotation / translation / scale pairs


@dataclass
class RtsParams:
    """Transform ranges for rotation-translation-scale pairs.

    rotation in degrees (symmetric range), scale multiplicative, canvas the
    output side length. The canvas must fit the scaled source axis-aligned
    extent so a placement region exists.
    """

    rotation: float = 45.0
    scale_lo: float = 0.7
    scale_hi: float = 1.3
    canvas: int = 42

    def __post_init__(self):
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ValueError("scale range must be positive and ordered")
        if self.rotation < 0:
            raise ValueError("rotation range must be non-negative")

    def check_fits(self, side: int):
        if self.scale_hi * side > self.canvas:
            raise ValueError(
                f"canvas {self.canvas} smaller than scaled source extent "
                f"{self.scale_hi * side:.1f}")


def warp_affine(src: np.ndarray, canvas: int, theta: float, scale: float,
                center: tuple[float, float]) -> np.ndarray:
    """Rotate src by theta (radians) and scale it about its own center, then
    place that center at `center` (row, col) in a canvas x canvas image.

    Inverse-mapped bilinear sampling with zero padding; pixel (i, j) reads the
    source at R(-theta)/scale applied to (i, j) - center, plus the source
    center. Output is float32.
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape
    cs_r, cs_c = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(canvas, dtype=np.float64),
                             np.arange(canvas, dtype=np.float64), indexing="ij")
    dr = rows - center[0]
    dc = cols - center[1]
    ct, st = math.cos(theta), math.sin(theta)
    sr = (ct * dr + st * dc) / scale + cs_r
    sc = (-st * dr + ct * dc) / scale + cs_c
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0
    out = np.zeros((canvas, canvas), dtype=np.float64)
    for di, dj, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        ri = r0 + di
        ci = c0 + dj
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = np.zeros_like(out)
        vals[ok] = src[ri[ok], ci[ok]]
        out += wgt * vals
    return out.astype(np.float32)


def _center_placement(canvas: int):
    return ((canvas - 1) / 2.0, (canvas - 1) / 2.0)


def _sample_transform(side: int, p: RtsParams, rng: np.random.Generator):
    theta = math.radians(rng.uniform(-p.rotation, p.rotation))
    scale = rng.uniform(p.scale_lo, p.scale_hi)
    half = scale * (side - 1) / 2.0
    lo, hi = half, (p.canvas - 1) - half
    if hi < lo:
        raise ValueError("no valid placement: canvas smaller than scaled source")
    center = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    return theta, scale, center


def gen_rts_pairs(data: Dataset, p: RtsParams, rng: np.random.Generator,
                  pairing: str = "centered") -> PairSet:
    """Pairs whose perturbed member is a random rotation/translation/scale of
    the source, rendered into a canvas; the conditioned member is the source
    centered at scale 1 without rotation (or a second random transform when
    pairing is "perturbed_only")."""
    n, h, w = data.images.shape
    if h != w:
        raise ValueError("rts sources must be square")
    p.check_fits(h)
    xs = np.empty((n, p.canvas * p.canvas), dtype=np.float32)
    ys = np.empty_like(xs)
    centered = _center_placement(p.canvas)
    for i in range(n):
        theta, scale, center = _sample_transform(h, p, rng)
        warped = warp_affine(data.images[i], p.canvas, theta, scale, center)
        xs[i] = np.clip(warped, 0.0, 1.0).reshape(-1)
        if pairing == "centered":
            base = warp_affine(data.images[i], p.canvas, 0.0, 1.0, centered)
        elif pairing == "perturbed_only":
            theta2, scale2, center2 = _sample_transform(h, p, rng)
            base = warp_affine(data.images[i], p.canvas, theta2, scale2, center2)
        else:
            raise ValueError(f"unknown pairing {pairing!r}")
        ys[i] = np.clip(base, 0.0, 1.0).reshape(-1)
    return PairSet(xs, ys, data.labels)


# ---------------------------------------------------------------------------
# IDX files


_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def read_idx(path: str) -> np.ndarray:
    """Parse an IDX file: unsigned-byte images (magic 0x803) scaled to [0, 1]
    float32 (N, H, W), or labels (magic 0x801) as int64 (N,).

    Malformed files raise ValueError naming the byte offset of the problem.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header at byte 0")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic == _IDX_IMAGES:
        ndim = 3
    elif magic == _IDX_LABELS:
        ndim = 1
    else:
        raise ValueError(f"{path}: unrecognized magic 0x{magic:08x} at byte 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated dimension table at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise ValueError(
            f"{path}: expected {count} data bytes after byte {header}, found {len(raw) - header}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    if magic == _IDX_IMAGES:
        return data.astype(np.float32) / 255.0
    return data.astype(np.int64)


# ---------------------------------------------------------------------------
# Synthetic corpus


def synth_shapes(n: int, size: int, rng: np.random.Generator) -> Dataset:
    """Randomly placed anti-aliased shapes: class 0 bars, class 1 disks.

    Shapes are placed fully inside the frame so the images can also serve as
    sources for the geometric pair generator. Deterministic given the rng
    state; classes drawn independently per example.
    """
    if size < 8:
        raise ValueError(f"size must be at least 8, got {size}")
    images = np.zeros((n, size, size), dtype=np.float32)
    labels = rng.integers(0, 2, size=n)
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    for i in range(n):
        if labels[i] == 1:
            radius = rng.uniform(0.15, 0.28) * size
            # soft edge adds 0.5 to the support; keep it off the border
            cy, cx = rng.uniform(radius + 0.5, size - 1.5 - radius, size=2)
            dist = np.hypot(rr - cy, cc - cx)
            images[i] = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        else:
            len_hi = min(0.4 * size, (size - 1) / 2 - 0.6)
            half_len = rng.uniform(0.25 * size, len_hi)
            half_th = rng.uniform(0.04, 0.08) * size
            angle = rng.uniform(0.0, math.pi)
            ca, sa = math.cos(angle), math.sin(angle)
            margin = abs(ca) * (half_len + 0.5) + abs(sa) * (half_th + 0.5)
            margin_c = abs(sa) * (half_len + 0.5) + abs(ca) * (half_th + 0.5)
            cy = rng.uniform(margin, size - 1 - margin)
            cx = rng.uniform(margin_c, size - 1 - margin_c)
            a = (rr - cy) * ca + (cc - cx) * sa
            b = -(rr - cy) * sa + (cc - cx) * ca
            images[i] = (np.clip(half_len + 0.5 - np.abs(a), 0, 1) *
                         np.clip(half_th + 0.5 - np.abs(b), 0, 1)).astype(np.float32)
    return Dataset(images, labels)
