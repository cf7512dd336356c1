"""Restoration network: modulated residual backbone with reference fusion."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import pixel_shuffle, resize_bicubic_t

FUSION_ORDERS = ("w_then_t", "t_then_w", "concat")
REF_MODES = ("dzsr", "tzsr", "rw_only")


class Shuffle(nn.Module):
    def __init__(self, r: int):
        super().__init__()
        self.r = r

    def forward(self, x):
        return pixel_shuffle(x, self.r)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x, scale=None):
        y = self.conv2(F.relu(self.conv1(x)))
        if scale is not None:
            y = y * scale[:, :, None, None]
        return x + y


class ModulationEncoder(nn.Module):
    """Produces one channel-scale vector in (0, 2) per residual block.

    Sees the fused features (pooled), and the reference image stacked with
    the LR region covering the same field of view, so it can pick up the
    color relation between the two lenses.
    """

    def __init__(self, c: int, n_blocks: int, width: int = 32, depth: int = 4):
        super().__init__()
        layers, ci = [], 6
        for _ in range(depth):
            layers += [nn.Conv2d(ci, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ci = width
        self.image_branch = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.mlp = nn.Sequential(nn.Linear(width + c, 2 * width), nn.LeakyReLU(0.2),
                                 nn.Linear(2 * width, n_blocks * c))
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)
        self.n_blocks, self.c = n_blocks, c

    def forward(self, fused, ref_img, lr_center):
        lr_up = resize_bicubic_t(lr_center, size=tuple(ref_img.shape[-2:]))
        z = torch.cat([self.image_branch(torch.cat([ref_img, lr_up], dim=1)),
                       fused.mean(dim=(-2, -1))], dim=1)
        v = 2.0 * torch.sigmoid(self.mlp(z))
        return list(v.view(-1, self.n_blocks, self.c).unbind(dim=1))


class Restorer(nn.Module):
    def __init__(self, channels: int = 32, n_blocks: int = 16, r_t: int = 4, r_w: int = 2,
                 mode: str = "dzsr", fusion: str = "w_then_t", split: int | None = None,
                 lr_channels: int | None = None):
        super().__init__()
        if mode not in REF_MODES:
            raise ValueError(f"mode must be one of {REF_MODES}")
        if fusion not in FUSION_ORDERS:
            raise ValueError(f"fusion must be one of {FUSION_ORDERS}")
        if r_t & (r_t - 1):
            raise ValueError("upsampler needs a power-of-two r_t")
        c = channels
        self.mode, self.fusion, self.r_t, self.r_w = mode, fusion, r_t, r_w
        self.n_blocks = n_blocks
        self.split = n_blocks // 2 if split is None else split
        lr_c = lr_channels or c
        self.uses_t = mode in ("dzsr", "tzsr")
        self.uses_w = mode in ("tzsr", "rw_only")
        if self.uses_t:
            self.adapt_t = nn.Sequential(nn.Conv2d(3 * r_t * r_t, c, 1), nn.LeakyReLU(0.2),
                                         nn.Conv2d(c, c, 3, padding=1))
        if self.uses_w:
            self.adapt_w = nn.Sequential(nn.Conv2d(3 * r_w * r_w, c, 1), nn.LeakyReLU(0.2),
                                         nn.Conv2d(c, c, 3, padding=1))
        progressive = mode == "tzsr" and fusion != "concat"
        n_in = lr_c + c * (2 if mode == "tzsr" and not progressive else 1)
        self.head = nn.Conv2d(n_in, c, 3, padding=1)
        self.merge = nn.Conv2d(2 * c, c, 3, padding=1) if progressive else None
        self.blocks = nn.ModuleList(ResBlock(c) for _ in range(n_blocks))
        self.body_tail = nn.Conv2d(c, c, 3, padding=1)
        self.encoder = ModulationEncoder(c, n_blocks)
        ups = []
        for _ in range(r_t.bit_length() - 1):
            ups += [nn.Conv2d(c, 4 * c, 3, padding=1), Shuffle(2), nn.LeakyReLU(0.2)]
        self.up = nn.Sequential(*ups)
        self.tail = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def _first_second(self, ft, fw):
        if self.mode == "dzsr":
            return ft, None
        if self.mode == "rw_only":
            return fw, None
        if self.fusion == "concat":
            return torch.cat([fw, ft], dim=1), None
        return (fw, ft) if self.fusion == "w_then_t" else (ft, fw)

    def forward(self, lr_img, lr_feat, ref_t_feat=None, ref_w_feat=None, ref_img=None,
                lr_center=None, scales=None):
        """``ref_img``/``lr_center`` feed the modulation encoder; ``scales`` overrides it."""
        ft = self.adapt_t(ref_t_feat) if self.uses_t else None
        fw = self.adapt_w(ref_w_feat) if self.uses_w else None
        first, second = self._first_second(ft, fw)
        h = self.head(torch.cat([lr_feat, first], dim=1))
        if scales is None:
            scales = self.encoder(h, ref_img, lr_center)
        x = h
        for i, block in enumerate(self.blocks):
            if i == self.split and second is not None:
                x = self.merge(torch.cat([x, second], dim=1))
            x = block(x, scales[i])
        x = self.body_tail(x) + h
        base = resize_bicubic_t(lr_img, scale=self.r_t)
        return base + self.tail(self.up(x))

    def modulation_vectors(self, fused, ref_img, lr_center):
        return self.encoder(fused, ref_img, lr_center)

