"""Pixel and feature level primitives shared by the rest of the package.

Images are float arrays of shape (H, W, C) with values in [0, 1]. Feature
maps and batched images inside the networks are torch tensors laid out as
(C, H, W) or (N, C, H, W). Flow fields are (H, W, 2) arrays holding (dx, dy)
in pixels, or (N, 2, H, W) tensors on the torch side.
"""
from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WIN = 11


# ---------------------------------------------------------------- cropping

def center_window(h: int, w: int, r: float) -> tuple[int, int, int, int]:
    """Return (top, left, height, width) of the central 1/r window."""
    if r < 1:
        raise ValueError(f"crop ratio must be >= 1, got {r}")
    ch, cw = int(math.floor(h / r)), int(math.floor(w / r))
    if ch < 1 or cw < 1:
        raise ValueError(f"center crop of {h}x{w} by {r} is empty")
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def center_crop(img: np.ndarray, r: float) -> np.ndarray:
    """Central floor(H/r) x floor(W/r) window of an (H, W, ...) array."""
    top, left, ch, cw = center_window(img.shape[0], img.shape[1], r)
    return img[top:top + ch, left:left + cw]


def center_crop_t(x: torch.Tensor, r: float) -> torch.Tensor:
    top, left, ch, cw = center_window(x.shape[-2], x.shape[-1], r)
    return x[..., top:top + ch, left:left + cw]


# ---------------------------------------------------------------- resizing

def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    out = np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1, 0.0)
    out = np.where((x > 1) & (x < 2), a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, out)
    return out


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers; kernel widened by 1/scale when shrinking
    scale = n_out / n_in
    support = 2.0 / min(scale, 1.0)
    stretch = min(scale, 1.0)
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) / scale - 0.5
        lo = int(math.floor(center - support))
        hi = int(math.ceil(center + support))
        taps = np.arange(lo, hi + 1)
        wts = cubic_kernel((taps - center) * stretch)
        wts = wts / wts.sum()
        np.add.at(mat[o], np.clip(taps, 0, n_in - 1), wts)
    return mat


def _out_size(n: int, scale: float) -> int:
    m = int(round(n * scale))
    if m < 1:
        raise ValueError(f"resize of {n} by {scale} is empty")
    return m


def resize_to(img: np.ndarray, size: tuple[int, int], clip: bool = True) -> np.ndarray:
    """Separable bicubic resampling of an (H, W, C) image to ``size``."""
    h, w = img.shape[:2]
    my = _resize_matrix(h, size[0])
    mx = _resize_matrix(w, size[1])
    out = np.einsum("oh,hwc->owc", my, img.astype(np.float64))
    out = np.einsum("pw,owc->opc", mx, out)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def resize_bicubic(img: np.ndarray, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = img.shape[:2]
    return resize_to(img, (_out_size(h, scale), _out_size(w, scale)))


def resize_bicubic_t(x: torch.Tensor, scale: float | None = None,
                     size: tuple[int, int] | None = None) -> torch.Tensor:
    """Same resampler as ``resize_to`` on (..., H, W) tensors, unclipped."""
    h, w = x.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("need a positive scale or an explicit size")
        size = (_out_size(h, scale), _out_size(w, scale))
    my = torch.as_tensor(_resize_matrix(h, size[0]), dtype=x.dtype)
    mx = torch.as_tensor(_resize_matrix(w, size[1]), dtype=x.dtype)
    return torch.matmul(torch.matmul(my, x), mx.T)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")


# ---------------------------------------------------------------- (un)shuffle

def pixel_unshuffle(f: torch.Tensor, r: int) -> torch.Tensor:
    """(…, C, H, W) -> (…, C*r*r, H/r, W/r); channel index = c*r*r + i*r + j."""
    *lead, c, h, w = f.shape
    if h % r or w % r:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {r}")
    x = f.reshape(*lead, c, h // r, r, w // r, r)
    n = len(lead)
    perm = list(range(n)) + [n, n + 2, n + 4, n + 1, n + 3]
    return x.permute(*perm).reshape(*lead, c * r * r, h // r, w // r)


def pixel_shuffle(f: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    *lead, c, h, w = f.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by {r * r}")
    x = f.reshape(*lead, c // (r * r), r, r, h, w)
    n = len(lead)
    perm = list(range(n)) + [n, n + 3, n + 1, n + 4, n + 2]
    return x.permute(*perm).reshape(*lead, c // (r * r), h * r, w * r)


# ---------------------------------------------------------------- warping

def backward_warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """out(p) = img(p + flow(p)), bilinear, clamped to the border."""
    h, w = img.shape[:2]
    if flow.shape[:2] != (h, w):
        raise ValueError(f"flow {flow.shape[:2]} does not match image {(h, w)}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(xx + flow[..., 0], 0, w - 1)
    sy = np.clip(yy + flow[..., 1], 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_bilinear_t(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample (N, C, H, W) at absolute pixel coords (N, Ho, Wo), border clamped."""
    h, w = x.shape[-2:]
    gx = 2.0 * px / max(w - 1, 1) - 1.0
    gy = 2.0 * py / max(h - 1, 1) - 1.0
    grid = torch.stack((gx, gy), dim=-1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


def backward_warp_t(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Torch twin of :func:`backward_warp`; flow is (N, 2, H, W) as (dx, dy)."""
    n, _, h, w = x.shape
    if flow.shape[-2:] != (h, w):
        raise ValueError("flow and image sizes differ")
    yy, xx = torch.meshgrid(torch.arange(h, dtype=x.dtype), torch.arange(w, dtype=x.dtype),
                            indexing="ij")
    return sample_bilinear_t(x, yy + flow[:, 1], xx + flow[:, 0])


def resize_flow(flow: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resample a flow field to ``size`` and rescale its vectors accordingly."""
    h, w = flow.shape[:2]
    out = resize_to(flow, size, clip=False)
    out[..., 0] *= size[1] / w
    out[..., 1] *= size[0] / h
    return out


# ---------------------------------------------------------------- metrics

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for [0, 1] data; ``inf`` when the images are identical."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gauss_window() -> np.ndarray:
    r = SSIM_WIN // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filt_valid(x: np.ndarray) -> np.ndarray:
    g = _gauss_window()
    x = ndimage.correlate1d(x, g, axis=0, mode="constant")
    x = ndimage.correlate1d(x, g, axis=1, mode="constant")
    r = SSIM_WIN // 2
    return x[r:-r, r:-r]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM at every window center fully inside the image, averaged over channels.

    Returned map has shape (H - 10, W - 10); entry (i, j) belongs to pixel (i + 5, j + 5).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN} pixels on each side")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = (SSIM_K1 ** 2), (SSIM_K2 ** 2)
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filt_valid(x), _filt_valid(y)
        vx = _filt_valid(x * x) - mx * mx
        vy = _filt_valid(y * y) - my * my
        cxy = _filt_valid(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_map(a, b).mean())


# ---------------------------------------------------------------- file I/O

def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, C) array -> (1, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()[None]


def to_image(x: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> (H, W, C) float64 array."""
    if x.dim() == 4:
        x = x[0]
    return x.detach().double().numpy().transpose(1, 2, 0)
