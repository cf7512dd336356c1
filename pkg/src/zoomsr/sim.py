"""Synthetic triple-zoom captures, real-capture loading and training pairs."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .imaging import (
    backward_warp,
    center_crop,
    gaussian_blur,
    read_png,
    resize_to,
    write_png,
)

log = logging.getLogger(__name__)

FLOW_MAGIC = b"ZSFLOW01"
LENS_FILES = {"ultra_wide": "ultrawide.png", "wide": "wide.png", "tele": "tele.png"}
LAPLACIAN_FLOOR = 1e-3


@dataclass
class CaptureParams:
    blur_sigma: float = 1.0
    parallax_amplitude: float = 3.0
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 10 / 255
    r_w: int = 2
    r_t: int = 4

    def __post_init__(self):
        self.color_gain = tuple(float(g) for g in self.color_gain)
        self.color_bias = tuple(float(b) for b in self.color_bias)
        if not self.r_t > self.r_w >= 1:
            raise ValueError(f"need r_t > r_w >= 1, got r_w={self.r_w} r_t={self.r_t}")
        if min(self.blur_sigma, self.parallax_amplitude, self.noise_sigma) < 0:
            raise ValueError("blur, parallax and noise amplitudes must be non-negative")
        if any(g < 0 for g in self.color_gain):
            raise ValueError("color gains must be non-negative")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CaptureParams":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"unknown capture parameter {key!r}")
            if key in ("color_gain", "color_bias"):
                kw[key] = tuple(float(x) for x in val.split(","))
            elif key in ("r_w", "r_t"):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        return cls(**kw)


@dataclass
class CaptureTruth:
    scene: np.ndarray
    flows: dict[str, np.ndarray]
    params: CaptureParams
    clean: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ZoomCapture:
    ultra_wide: np.ndarray
    wide: np.ndarray
    tele: np.ndarray
    r_w: int = 2
    r_t: int = 4
    truth: CaptureTruth | None = None
    name: str = ""


@dataclass
class TrainingPair:
    lr: np.ndarray
    ref_t: np.ndarray
    gt: np.ndarray
    ref_w: np.ndarray | None = None
    # simulator parallax restricted to the lr window: lr(p) = clean(p + lr_flow(p))
    lr_flow: np.ndarray | None = None
    r_w: int = 2
    r_t: int = 4
    name: str = ""


# ---------------------------------------------------------------- scenes

def _stripes(h, w, rng):
    period = rng.uniform(8, 32)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = (xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi / period
    if rng.random() < 0.5:
        return (np.sin(phase) > 0).astype(float)
    return 0.5 + 0.5 * np.sin(phase)


def _checker(h, w, rng):
    cell = int(rng.integers(6, 20))
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy // cell + xx // cell) % 2).astype(float)


def synth_scene(seed: int, size: tuple[int, int] = (256, 256)) -> np.ndarray:
    """Procedural RGB scene mixing gradients, textures, shapes and glyph strokes."""
    h, w = size
    if h < 64 or w < 64:
        raise ValueError("scenes must be at least 64x64")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    ang = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)), 0, 1)[..., None]
    img = c0 * (1 - t) + c1 * t

    for _ in range(int(rng.integers(3, 6))):
        ph, pw = int(rng.integers(h // 6, h // 2)), int(rng.integers(w // 6, w // 2))
        top, left = int(rng.integers(0, h - ph)), int(rng.integers(0, w - pw))
        pat = _stripes(ph, pw, rng) if rng.random() < 0.6 else _checker(ph, pw, rng)
        ca, cb = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        img[top:top + ph, left:left + pw] = ca * pat[..., None] + cb * (1 - pat[..., None])

    canvas = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(6, 12))):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        rad = rng.uniform(4, max(h, w) / 8)
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        if rng.random() < 0.5:
            draw.ellipse([x0 - rad, y0 - rad, x0 + rad, y0 + rad], fill=color)
        else:
            k = int(rng.integers(3, 6))
            angs = np.sort(rng.uniform(0, 2 * np.pi, k))
            pts = [(x0 + rad * np.cos(a), y0 + rad * np.sin(a)) for a in angs]
            draw.polygon(pts, fill=color)
    # glyph-like strokes: short polylines in small boxes, grouped in rows
    for _ in range(int(rng.integers(2, 5))):
        gx, gy = rng.uniform(0, w * 0.7), rng.uniform(0, h * 0.9)
        gsize = rng.uniform(5, 12)
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        width = int(rng.integers(1, 3))
        for gi in range(int(rng.integers(3, 8))):
            ox = gx + gi * gsize * 1.2
            pts = [(ox + rng.uniform(0, gsize), gy + rng.uniform(0, gsize * 1.4))
                   for _ in range(int(rng.integers(2, 5)))]
            draw.line(pts, fill=color, width=width)
    return np.asarray(canvas, dtype=np.float64) / 255.0


def laplacian_energy(img: np.ndarray, tile: int = 16) -> float:
    """Upper-quartile over tiles of the mean squared Laplacian of luminance."""
    gray = img.mean(axis=2)
    lap = (-4 * gray[1:-1, 1:-1] + gray[:-2, 1:-1] + gray[2:, 1:-1]
           + gray[1:-1, :-2] + gray[1:-1, 2:])
    h, w = lap.shape
    h, w = h - h % tile, w - w % tile
    tiles = (lap[:h, :w] ** 2).reshape(h // tile, tile, w // tile, tile).mean(axis=(1, 3))
    return float(np.percentile(tiles, 75))


# ---------------------------------------------------------------- capture

def parallax_field(h: int, w: int, amplitude: float, rng: np.random.Generator,
                   n_waves: int = 3) -> np.ndarray:
    """Smooth (H, W, 2) displacement: offset plus low-frequency sinusoids, max |v| = amplitude."""
    if amplitude == 0:
        return np.zeros((h, w, 2))
    yy, xx = np.mgrid[0:h, 0:w]
    flow = np.zeros((h, w, 2))
    for c in range(2):
        flow[..., c] = rng.uniform(-1, 1)
        for _ in range(n_waves):
            fy, fx = rng.uniform(-1.5, 1.5, 2)
            ph = rng.uniform(0, 2 * np.pi)
            flow[..., c] += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xx / w + fy * yy / h) + ph)
    peak = np.sqrt((flow ** 2).sum(-1)).max()
    return flow * (amplitude / peak)


def _observe(clean, flow, p: CaptureParams, noise_sigma, rng):
    img = backward_warp(clean, flow)
    img = img * np.asarray(p.color_gain) + np.asarray(p.color_bias)
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def simulate_capture(scene: np.ndarray, p: CaptureParams, seed: int, name: str = "") -> ZoomCapture:
    """Render ultra-wide, wide and telephoto views of a latent scene.

    The scene is sampled at telephoto resolution over the ultra-wide field of
    view, so every lens ends up with (H / r_t, W / r_t) pixels.
    """
    sh, sw = scene.shape[:2]
    if sh % p.r_t or sw % p.r_t or sh // p.r_t < 32 or sw // p.r_t < 32:
        raise ValueError(f"scene {sh}x{sw} too small or not divisible for r_t={p.r_t}")
    rng = np.random.default_rng(seed)
    n = (sh // p.r_t, sw // p.r_t)
    blurred = gaussian_blur(scene, p.blur_sigma)

    clean_u = resize_to(blurred, n)
    flow_u = parallax_field(*n, p.parallax_amplitude, rng)
    ultra_wide = _observe(clean_u, flow_u, p, p.noise_sigma, rng)

    clean_w = resize_to(center_crop(blurred, p.r_w), n)
    flow_w = parallax_field(*n, p.parallax_amplitude, rng)
    wide = _observe(clean_w, flow_w, p, p.noise_sigma, rng)

    tele = center_crop(scene, p.r_t)
    if p.noise_sigma > 0:
        tele = np.clip(tele + rng.normal(0.0, p.noise_sigma / 4, tele.shape), 0.0, 1.0)

    truth = CaptureTruth(scene=scene, flows={"ultra_wide": flow_u, "wide": flow_w},
                         params=p, clean={"ultra_wide": clean_u, "wide": clean_w})
    return ZoomCapture(ultra_wide, wide, tele, p.r_w, p.r_t, truth, name)


def simulate_dataset(n: int, seed: int, base: CaptureParams, scene_size=(256, 256),
                     gain_jitter: float = 0.1) -> list[ZoomCapture]:
    """``n`` captures with per-scene color gains drawn from 1 +/- gain_jitter."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = int(rng.integers(2**31))
        gains = tuple(np.asarray(base.color_gain) * rng.uniform(1 - gain_jitter, 1 + gain_jitter, 3))
        params = replace(base, color_gain=gains)
        out.append(simulate_capture(synth_scene(s, scene_size), params, s + 1, name=f"scene_{i:03d}"))
    return out


# ---------------------------------------------------------------- pairs

def make_training_pair(c: ZoomCapture) -> TrainingPair:
    h, w = c.ultra_wide.shape[:2]
    if h % c.r_t or w % c.r_t or h % c.r_w or w % c.r_w:
        raise ValueError(f"capture {c.name!r} dims {h}x{w} not divisible by r_w/r_t")
    lr = center_crop(c.ultra_wide, c.r_t)
    gt = c.tele
    if gt.shape[:2] != (lr.shape[0] * c.r_t, lr.shape[1] * c.r_t):
        raise ValueError(f"capture {c.name!r}: tele is not r_t x the cropped ultra-wide")
    lr_flow = None
    if c.truth is not None:
        lr_flow = center_crop(c.truth.flows["ultra_wide"], c.r_t).copy()
    return TrainingPair(lr=lr, ref_t=center_crop(c.tele, c.r_t), gt=gt,
                        ref_w=center_crop(c.wide, c.r_w), lr_flow=lr_flow,
                        r_w=c.r_w, r_t=c.r_t, name=c.name)


def _flip_img(a, hflip, vflip, transpose):
    if a is None:
        return None
    if hflip:
        a = a[:, ::-1]
    if vflip:
        a = a[::-1]
    if transpose:
        a = a.transpose(1, 0, 2)
    return np.ascontiguousarray(a)


def _flip_flow(f, hflip, vflip, transpose):
    if f is None:
        return None
    f = _flip_img(f, hflip, vflip, transpose).copy()
    if hflip:
        f[..., 0] *= -1
    if vflip:
        f[..., 1] *= -1
    if transpose:
        f = f[..., ::-1].copy()
    return f


def transform_pair(pair: TrainingPair, hflip=False, vflip=False, transpose=False) -> TrainingPair:
    g = dict(hflip=hflip, vflip=vflip, transpose=transpose)
    return replace(pair, lr=_flip_img(pair.lr, **g), ref_t=_flip_img(pair.ref_t, **g),
                   gt=_flip_img(pair.gt, **g), ref_w=_flip_img(pair.ref_w, **g),
                   lr_flow=_flip_flow(pair.lr_flow, **g))


def augment(pair: TrainingPair, seed: int) -> TrainingPair:
    """Random horizontal flip, vertical flip and 90 degree rotation, shared by all members."""
    rng = np.random.default_rng(seed)
    hflip, vflip, transpose = (bool(b) for b in rng.integers(0, 2, 3))
    return transform_pair(pair, hflip, vflip, transpose)


# ---------------------------------------------------------------- files

def write_flow(path, flow: np.ndarray) -> None:
    h, w = flow.shape[:2]
    planes = np.ascontiguousarray(flow.transpose(2, 0, 1), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(planes.tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a ZSFLOW01 file")
    h, w = struct.unpack("<II", data[8:16])
    planes = np.frombuffer(data, dtype="<f4", offset=16)
    if planes.size != 2 * h * w:
        raise ValueError(f"{path}: truncated flow payload")
    return planes.reshape(2, h, w).transpose(1, 2, 0).astype(np.float64)


def write_capture_dir(root, captures: list[ZoomCapture]) -> list[Path]:
    root = Path(root)
    dirs = []
    for i, c in enumerate(captures):
        d = root / (c.name or f"scene_{i:03d}")
        for attr, fname in LENS_FILES.items():
            write_png(d / fname, getattr(c, attr))
        if c.truth is not None:
            t = d / "truth"
            t.mkdir(parents=True, exist_ok=True)
            for lens, flow in c.truth.flows.items():
                write_flow(t / f"flow_{lens}.zsflow", flow)
            (t / "params.txt").write_text(c.truth.params.to_text())
            write_png(t / "scene.png", c.truth.scene)
        dirs.append(d)
    return dirs


def load_capture_dir(path, r_w: int = 2, r_t: int = 4, load_truth: bool = False) -> list[ZoomCapture]:
    """One capture per scene directory; wide and tele are resized onto the ultra-wide pixel grid.

    With r_w and r_t fixed, every lens in this layout has the same pixel count
    (each lens zooms by its ratio and narrows its field of view by the same
    ratio), so normalizing the three images to a common size rounded down to a
    multiple of r_t makes the resolution ratios exact.
    """
    root = Path(path)
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        missing = [f for f in LENS_FILES.values() if not (d / f).exists()]
        if missing:
            log.warning("skipping %s: missing %s", d.name, ", ".join(missing))
            continue
        imgs = {attr: read_png(d / fname) for attr, fname in LENS_FILES.items()}
        h, w = imgs["ultra_wide"].shape[:2]
        step = int(np.lcm(r_w, r_t))
        size = (h - h % step, w - w % step)
        for attr, img in imgs.items():
            if img.shape[:2] != size:
                imgs[attr] = resize_to(img, size)
        truth, cr_w, cr_t = None, r_w, r_t
        if load_truth and (d / "truth").is_dir():
            t = d / "truth"
            params = CaptureParams.from_text((t / "params.txt").read_text())
            flows = {lens: read_flow(t / f"flow_{lens}.zsflow") for lens in ("ultra_wide", "wide")}
            scene = read_png(t / "scene.png") if (t / "scene.png").exists() else None
            truth = CaptureTruth(scene=scene, flows=flows, params=params)
            cr_w, cr_t = params.r_w, params.r_t
        out.append(ZoomCapture(imgs["ultra_wide"], imgs["wide"], imgs["tele"], cr_w, cr_t, truth, d.name))
    return out
