"""Pluggable optical-flow providers.

Every provider answers the same question: given ``src`` and ``dst`` covering
the same field of view, return a flow on ``dst``'s grid such that
``backward_warp(src, flow)`` looks like ``dst``.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import backward_warp, resize_flow, resize_to
from .sim import read_flow

log = logging.getLogger(__name__)


class FlowFailure(RuntimeError):
    pass


def invert_flow(flow: np.ndarray, iters: int = 30) -> np.ndarray:
    """Fixed-point inverse g(p) = -flow(p + g(p)) of a smooth displacement field."""
    g = -flow
    for _ in range(iters):
        g = -backward_warp(flow, g)
    return g


def _fit_to(flow: np.ndarray, size) -> np.ndarray:
    return flow if flow.shape[:2] == tuple(size) else resize_flow(flow, tuple(size))


class OracleFlow:
    """Returns the simulator's ground truth, handed in by the caller as ``truth``."""
    kind = "oracle"

    def estimate(self, src, dst, truth=None, key=None):
        if truth is None:
            raise FlowFailure("oracle flow requested for a sample without simulator truth")
        return _fit_to(truth, dst.shape[:2])


class ExternalFlow:
    """Precomputed ZSFLOW01 files, ``<root>/<key>.zsflow``."""
    kind = "external"

    def __init__(self, root):
        self.root = Path(root)

    def estimate(self, src, dst, truth=None, key=None):
        path = self.root / f"{key}.zsflow"
        if not path.exists():
            raise FlowFailure(f"no external flow file {path}")
        return _fit_to(read_flow(path), dst.shape[:2])


def _normalize(img):
    g = img.mean(axis=2) if img.ndim == 3 else img
    return (g - g.mean()) / (g.std() + 1e-6)


def _shift(img, dy, dx):
    h, w = img.shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return img[np.ix_(ys, xs)]


def _subpixel(c_minus, c0, c_plus):
    den = c_minus - 2 * c0 + c_plus
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(den > 1e-12, 0.5 * (c_minus - c_plus) / den, 0.0)
    return np.clip(d, -0.5, 0.5)


class ClassicalFlow:
    """Coarse-to-fine block matching (SSD over square blocks, integer search + parabolic refinement)."""
    kind = "classical"

    def __init__(self, levels: int = 3, block: int = 5, radius: int = 4,
                 penalty: float = 0.01, smooth: float = 2.0):
        self.levels = levels
        self.block = block
        self.radius = radius
        self.penalty = penalty
        self.smooth = smooth

    def _refine(self, src, dst, flow):
        warped = backward_warp(src[..., None], flow)[..., 0]
        r = self.radius
        costs = np.empty((2 * r + 1, 2 * r + 1) + dst.shape)
        for i, dy in enumerate(range(-r, r + 1)):
            for j, dx in enumerate(range(-r, r + 1)):
                diff = (_shift(warped, dy, dx) - dst) ** 2
                costs[i, j] = (ndimage.uniform_filter(diff, self.block, mode="nearest")
                               + self.penalty * (dy * dy + dx * dx))
        flat = costs.reshape((2 * r + 1) ** 2, *dst.shape)
        best = flat.argmin(axis=0)
        bi, bj = np.divmod(best, 2 * r + 1)
        yy, xx = np.indices(dst.shape)
        c0 = costs[bi, bj, yy, xx]
        sub_y = _subpixel(costs[np.clip(bi - 1, 0, 2 * r), bj, yy, xx], c0,
                          costs[np.clip(bi + 1, 0, 2 * r), bj, yy, xx])
        sub_x = _subpixel(costs[bi, np.clip(bj - 1, 0, 2 * r), yy, xx], c0,
                          costs[bi, np.clip(bj + 1, 0, 2 * r), yy, xx])
        step = np.stack([bj - r + np.where((bj > 0) & (bj < 2 * r), sub_x, 0.0),
                         bi - r + np.where((bi > 0) & (bi < 2 * r), sub_y, 0.0)], axis=-1)
        out = flow + step
        for c in range(2):
            out[..., c] = ndimage.median_filter(out[..., c], size=self.block, mode="nearest")
        # textured blocks are trusted more when smoothing
        gy, gx = np.gradient(dst)
        conf = ndimage.uniform_filter(gx * gx + gy * gy, self.block, mode="nearest") + 1e-3
        num = ndimage.gaussian_filter(out * conf[..., None], (self.smooth, self.smooth, 0), mode="nearest")
        den = ndimage.gaussian_filter(conf, self.smooth, mode="nearest")[..., None]
        return num / den

    def estimate(self, src, dst, truth=None, key=None):
        if src.shape[:2] != dst.shape[:2]:
            src = resize_to(src, dst.shape[:2])
        s, d = _normalize(src), _normalize(dst)
        pyramid = [(s, d)]
        for _ in range(self.levels - 1):
            ps, pd = pyramid[-1]
            if min(ps.shape) < 2 * self.block:
                break
            half = (ps.shape[0] // 2, ps.shape[1] // 2)
            pyramid.append((resize_to(ps[..., None], half, clip=False)[..., 0],
                            resize_to(pd[..., None], half, clip=False)[..., 0]))
        flow = np.zeros(pyramid[-1][1].shape + (2,))
        for ps, pd in reversed(pyramid):
            flow = _fit_to(flow, pd.shape)
            flow = self._refine(ps, pd, flow)
        before = np.abs(s - d).mean()
        after = np.abs(backward_warp(s[..., None], flow)[..., 0] - d).mean()
        if not np.all(np.isfinite(flow)) or after > before:
            raise FlowFailure(f"block matching did not converge ({before:.4f} -> {after:.4f})")
        return flow


def make_provider(kind: str, root=None):
    if kind == "oracle":
        return OracleFlow()
    if kind == "classical":
        return ClassicalFlow()
    if kind == "external":
        if root is None:
            raise ValueError("external flow provider needs a directory")
        return ExternalFlow(root)
    raise ValueError(f"unknown flow provider {kind!r}")
