"""Two-stage LR -> GT alignment used only while training.

Stage one backward-warps the LR patch with a patch-level flow. Stage two
builds an auxiliary LR image from the GT with a generator whose kernels are
forced to keep their centroid at the kernel center, and uses it to steer
AdaSTN deformable convolutions. At test time the offsets are zero and every
AdaSTN stage collapses to a 1x1 convolution.
"""
from __future__ import annotations

import io
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .flow import FlowFailure, invert_flow
from .imaging import (
    backward_warp,
    backward_warp_t,
    resize_bicubic,
    resize_flow,
    sample_bilinear_t,
    to_uint8,
)

log = logging.getLogger(__name__)

# rows: vertical, horizontal offsets of the 3x3 neighbourhood in raster order
POS_CODING = torch.tensor([[-1., -1., -1., 0., 0., 0., 1., 1., 1.],
                           [-1., 0., 1., -1., 0., 1., -1., 0., 1.]])

NOISE_MODES = ("none", "jpeg", "gaussian", "both")


# ---------------------------------------------------------------- stage one

def lr_to_gt_flow(lr_flow: np.ndarray, gt_size) -> np.ndarray:
    """GT-grid flow that warps the upsampled LR onto the GT, from simulator parallax."""
    return resize_flow(invert_flow(lr_flow), gt_size)


LR_WARPS = ("bilinear", "nearest")


def patch_flow_align(lr: np.ndarray, gt: np.ndarray, fp, r_t: int, truth=None, key=None,
                     interp: str = "bilinear"):
    """Backward-warp the LR patch toward the GT.

    Returns ``(warped_lr, ok)``. ``truth`` is the GT-grid flow handed to an
    oracle provider; other providers ignore it. On estimation failure the LR
    patch comes back unwarped with ``ok`` False.

    ``interp="nearest"`` rounds the LR-grid flow to whole pixels, so the
    warped patch keeps the noise statistics of an unwarped capture and the
    sub-pixel remainder is left to the feature-level alignment.
    """
    if interp not in LR_WARPS:
        raise ValueError(f"interp must be one of {LR_WARPS}")
    if gt.shape[:2] != (lr.shape[0] * r_t, lr.shape[1] * r_t):
        raise ValueError(f"gt {gt.shape[:2]} is not {r_t}x lr {lr.shape[:2]}")
    lr_up = resize_bicubic(lr, r_t)
    try:
        flow = fp.estimate(lr_up, gt, truth=truth, key=key)
    except FlowFailure as exc:
        log.warning("patch flow failed (%s); using unwarped LR", exc)
        return lr.copy(), False
    flow_lr = resize_flow(flow, lr.shape[:2])
    if interp == "nearest":
        flow_lr = np.round(flow_lr)
    return backward_warp(lr, flow_lr), True


# ---------------------------------------------------------------- auxiliary LR

def position_preserving_loss(w: torch.Tensor) -> torch.Tensor:
    """Distance of each kernel's weighted centroid from the kernel center.

    ``w`` is (k, k) or (C_out, C_in, k, k); the per-kernel value is averaged
    over channel pairs.
    """
    k = w.shape[-1]
    if k % 2 == 0 or w.shape[-2] != k:
        raise ValueError(f"kernel must be square with odd size, got {tuple(w.shape[-2:])}")
    if w.dim() == 2:
        w = w[None, None]
    c = torch.arange(k, dtype=w.dtype) - k / 2 + 0.5
    row = (w * c[:, None]).sum(dim=(-2, -1)).abs()
    col = (w * c[None, :]).sum(dim=(-2, -1)).abs()
    return (row + col).mean()


def _delta_init(conv: nn.Conv2d, jitter: float, gen: torch.Generator):
    with torch.no_grad():
        w = torch.randn(conv.weight.shape, generator=gen) * jitter
        k = conv.kernel_size[0] // 2
        n = min(conv.in_channels, conv.out_channels)
        w[torch.arange(n), torch.arange(n), k, k] += 1.0
        conv.weight.copy_(w)
        if conv.bias is not None:
            conv.bias.zero_()


class AuxGenerator(nn.Module):
    """Position-preserving generator mapping GT to an LR-like image on the LR grid."""

    def __init__(self, width: int = 32, strides=(2, 2, 1, 1, 1), k: int = 3,
                 phase_align: bool = True, seed: int = 0):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("generator kernels must have odd size")
        self.strides = tuple(strides)
        self.scale = int(np.prod(strides))
        self.phase_align = phase_align
        chans = [3] + [width] * (len(strides) - 1) + [3]
        self.convs = nn.ModuleList(
            nn.Conv2d(ci, co, k, stride=s, padding=k // 2, padding_mode="replicate")
            for ci, co, s in zip(chans[:-1], chans[1:], strides))
        self.hidden = chans[1:-1]
        self.guide = nn.Sequential(nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2),
                                   nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                                   nn.Linear(width, 2 * width), nn.LeakyReLU(0.2),
                                   nn.Linear(2 * width, sum(self.hidden)))
        gen = torch.Generator().manual_seed(seed)
        for conv in self.convs:
            _delta_init(conv, 0.01, gen)
        nn.init.zeros_(self.guide[-1].weight)
        nn.init.zeros_(self.guide[-1].bias)

    def guidance(self, warped_lr: torch.Tensor) -> list[torch.Tensor]:
        z = 1.0 + self.guide(warped_lr)
        return list(torch.split(z, self.hidden, dim=1))

    def forward(self, gt: torch.Tensor, warped_lr: torch.Tensor | None = None,
                guidance: list[torch.Tensor] | None = None) -> torch.Tensor:
        if guidance is None:
            guidance = self.guidance(warped_lr)
        x = gt
        if self.phase_align and self.scale > 1:
            # LR pixel i is centered on GT coordinate s*i + (s-1)/2
            shift = torch.full((x.shape[0], 2, *x.shape[-2:]), (self.scale - 1) / 2, dtype=x.dtype)
            x = backward_warp_t(x, shift)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x * guidance[i][:, :, None, None], 0.2)
        return x

    def kernels(self):
        return [c.weight for c in self.convs]


def aux_generator_objective(out: torch.Tensor, warped_lr: torch.Tensor, gen: AuxGenerator,
                            lambda_p: float = 100.0) -> torch.Tensor:
    content = (out - warped_lr).abs().mean()
    position = sum(position_preserving_loss(w) for w in gen.kernels())
    return content + lambda_p * position


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def inject_noise(aux: np.ndarray, rng: np.random.Generator, mode: str = "both",
                 sigma: float | None = None, quality: int | None = None) -> np.ndarray:
    """Gaussian noise (sigma ~ U[5/255, 30/255]) followed by a JPEG round trip (q ~ U[60, 95])."""
    if mode not in NOISE_MODES:
        raise ValueError(f"noise mode must be one of {NOISE_MODES}")
    out = np.asarray(aux, dtype=np.float64)
    if mode in ("gaussian", "both"):
        s = rng.uniform(5 / 255, 30 / 255) if sigma is None else sigma
        out = np.clip(out + rng.normal(0.0, 1.0, out.shape) * s, 0.0, 1.0)
    if mode in ("jpeg", "both"):
        q = int(rng.integers(60, 96)) if quality is None else quality
        out = jpeg_roundtrip(out, q)
    return out


# ---------------------------------------------------------------- AdaSTN

def offsets_from_affine(A: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """P = A G + b per pixel; A (..., 2, 2), b (..., 2) -> P (..., 2, 9)."""
    return torch.matmul(A, POS_CODING.to(A.dtype)) + b[..., None]


def adastn_deform(x: torch.Tensor, P: torch.Tensor | None, weight: torch.Tensor,
                  bias: torch.Tensor | None = None) -> torch.Tensor:
    """y(q) = sum_k w_k x(q + p_k) with bilinear, border-clamped sampling.

    x is (N, C, H, W); P is (N, H, W, 2, 9) with (dy, dx) rows or None for
    all-zero offsets; weight is (C_out, C_in, 9).
    """
    n, c, h, w = x.shape
    if P is None:
        P = x.new_zeros(n, h, w, 2, 9)
    if P.shape[1:3] != (h, w):
        raise ValueError("offset field does not match the feature map")
    yy, xx = torch.meshgrid(torch.arange(h, dtype=x.dtype), torch.arange(w, dtype=x.dtype),
                            indexing="ij")
    py = (yy[None, :, :, None] + P[..., 0, :]).permute(0, 3, 1, 2).reshape(n, 9 * h, w)
    px = (xx[None, :, :, None] + P[..., 1, :]).permute(0, 3, 1, 2).reshape(n, 9 * h, w)
    cols = sample_bilinear_t(x, py, px).reshape(n, c, 9, h, w)
    y = torch.einsum("nckhw,ock->nohw", cols, weight)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y


class OffsetEstimator(nn.Module):
    """Predicts a per-pixel affine matrix and translation from paired features."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(2 * channels, channels, 3, padding=1),
                                  nn.LeakyReLU(0.2), nn.Conv2d(channels, 6, 3, padding=1))
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, x, aux):
        z = self.body(torch.cat([x, aux], dim=1)).permute(0, 2, 3, 1)
        A = z[..., :4].reshape(*z.shape[:3], 2, 2)
        return A, z[..., 4:]


class AdaSTNStage(nn.Module):
    def __init__(self, channels: int, p_zero: float = 0.3):
        super().__init__()
        if not 0 <= p_zero <= 1:
            raise ValueError("zeroing probability must lie in [0, 1]")
        self.p_zero = p_zero
        self.estimator = OffsetEstimator(channels)
        self.weight = nn.Parameter(torch.empty(channels, channels, 9))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight.view(channels, channels, 3, 3), a=0.2)

    def offsets(self, x, aux, keep: torch.Tensor | None = None):
        A, b = self.estimator(x, aux)
        P = offsets_from_affine(A, b)
        if keep is not None:
            P = P * keep.to(P.dtype)[:, None, None, None, None]
        return P

    def forward(self, x, aux=None, keep=None):
        P = None if aux is None else self.offsets(x, aux, keep)
        return F.leaky_relu(adastn_deform(x, P, self.weight, self.bias), 0.2)


class LRAligner(nn.Module):
    """Feature heads plus a stack of AdaSTN stages."""

    def __init__(self, channels: int = 32, n_stages: int = 3, p_zero: float = 0.3):
        super().__init__()
        self.head = nn.Conv2d(3, channels, 3, padding=1)
        self.aux_head = nn.Conv2d(3, channels, 3, padding=1)
        self.stages = nn.ModuleList(AdaSTNStage(channels, p_zero) for _ in range(n_stages))

    def zero_draws(self, n: int, gen: torch.Generator) -> torch.Tensor:
        """(n_stages, n) mask, 1 where the stage keeps its offsets."""
        p = torch.tensor([s.p_zero for s in self.stages])[:, None]
        return (torch.rand(len(self.stages), n, generator=gen) >= p).float()

    def forward(self, warped_lr, aux_lr=None, mode: str = "test", keep=None):
        if mode == "test":
            if aux_lr is not None:
                raise ValueError("auxiliary LR is not available at test time")
        elif mode == "train":
            if aux_lr is None:
                raise ValueError("train mode needs the auxiliary LR")
        else:
            raise ValueError(f"unknown mode {mode!r}")
        x = F.leaky_relu(self.head(warped_lr), 0.2)
        a = None if aux_lr is None else F.leaky_relu(self.aux_head(aux_lr), 0.2)
        for i, stage in enumerate(self.stages):
            x = stage(x, a, None if keep is None else keep[i])
        return x
