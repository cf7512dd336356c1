"""Reference alignment by cosine-similarity matching on the LR grid.

Matching runs on features downsampled 4x from the anchor upscaled to
reference resolution, so one match position corresponds to one LR pixel. The
reference content that gets gathered is the reference image itself,
rearranged by ``pixel_unshuffle`` so each LR-grid vector carries an r x r
block of reference pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import pixel_unshuffle, resize_bicubic_t

MATCH_DOWNSAMPLE = 4


def _highpass(img: torch.Tensor, sigma: float) -> torch.Tensor:
    k = 2 * int(3 * sigma) + 1
    g = torch.exp(-(torch.arange(k, dtype=img.dtype) - k // 2) ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    c = img.shape[1]
    x = F.pad(img, (k // 2,) * 4, mode="replicate")
    x = F.conv2d(x, g.view(1, 1, 1, k).repeat(c, 1, 1, 1), groups=c)
    x = F.conv2d(x, g.view(1, 1, k, 1).repeat(c, 1, 1, 1), groups=c)
    return img - x


class MatchExtractor(nn.Module):
    """Fixed random conv embedder: 3x3 stage then two 2x2 stride-2 stages (total stride 4).

    Input is high-passed first, which removes local brightness offsets that
    would otherwise dominate the cosine similarity. The small receptive field
    keeps features of a small reference from being dominated by padding.
    """

    def __init__(self, channels: int = 32, seed: int = 1234, highpass_sigma: float = 4.0):
        super().__init__()
        self.highpass_sigma = highpass_sigma
        self.convs = nn.ModuleList([nn.Conv2d(3, channels, 3, padding=1, padding_mode="replicate"),
                                    nn.Conv2d(channels, channels, 2, stride=2),
                                    nn.Conv2d(channels, channels, 2, stride=2)])
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * conv.kernel_size[0] ** 2
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = _highpass(img, self.highpass_sigma)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


@dataclass
class IndexMap:
    index: torch.Tensor     # (N, H, W) raster index into the reference grid
    score: torch.Tensor     # (N, H, W) cosine similarity at that index
    ref_shape: tuple[int, int]

    @property
    def rows(self):
        return self.index // self.ref_shape[1]

    @property
    def cols(self):
        return self.index % self.ref_shape[1]


def _unit(x: torch.Tensor) -> torch.Tensor:
    n = x.norm(dim=1, keepdim=True)
    return torch.where(n > 0, x / n.clamp_min(1e-30), torch.zeros_like(x))


def match_index_map(ref_feat: torch.Tensor, lr_feat: torch.Tensor) -> IndexMap:
    """Best cosine match in ``ref_feat`` for every position of ``lr_feat``.

    Accepts (C, H, W) or (N, C, H, W). Zero vectors have similarity 0 with
    everything; ties resolve to the smallest raster index.
    """
    squeeze = ref_feat.dim() == 3
    if squeeze:
        ref_feat, lr_feat = ref_feat[None], lr_feat[None]
    n, c, hr, wr = ref_feat.shape
    h, w = lr_feat.shape[-2:]
    if hr * wr == 0 or h * w == 0:
        raise ValueError("empty feature map")
    r = _unit(ref_feat.reshape(n, c, hr * wr))
    q = _unit(lr_feat.reshape(n, c, h * w))
    sim = torch.einsum("ncq,ncr->nqr", q, r)
    score, index = sim.max(dim=2)
    # torch.max does not promise first-occurrence on ties; argmax does
    index = torch.argmax((sim == score[..., None]).to(torch.int8), dim=2)
    out = IndexMap(index.reshape(n, h, w), score.reshape(n, h, w), (hr, wr))
    if squeeze:
        out = IndexMap(out.index[0], out.score[0], out.ref_shape)
    return out


def warp_ref(ref_feat: torch.Tensor, idx: IndexMap) -> torch.Tensor:
    """Gather reference vectors at the matched positions (no interpolation)."""
    squeeze = ref_feat.dim() == 3
    index = idx.index
    if squeeze:
        ref_feat, index = ref_feat[None], index[None]
    n, c, hr, wr = ref_feat.shape
    if (hr, wr) != tuple(idx.ref_shape):
        raise ValueError("index map was built for a different reference grid")
    if index.min() < 0 or index.max() >= hr * wr:
        raise IndexError("index map points outside the reference grid")
    h, w = index.shape[-2:]
    flat = index.reshape(n, 1, h * w).expand(n, c, h * w)
    out = torch.gather(ref_feat.reshape(n, c, hr * wr), 2, flat).reshape(n, c, h, w)
    return out[0] if squeeze else out


def paste_window(h: int, w: int, ph: int, pw: int) -> tuple[int, int]:
    if ph > h or pw > w:
        raise ValueError(f"paste window {ph}x{pw} exceeds feature grid {h}x{w}")
    return (h - ph) // 2, (w - pw) // 2


def center_paste(warped_ref: torch.Tensor, ref_img: torch.Tensor, r: int) -> torch.Tensor:
    """Overwrite the central window of ``warped_ref`` with ``pixel_unshuffle(ref_img, r)``."""
    block = pixel_unshuffle(ref_img, r)
    if block.shape[-3] != warped_ref.shape[-3]:
        raise ValueError("unshuffled reference and warped features disagree on channels")
    top, left = paste_window(*warped_ref.shape[-2:], *block.shape[-2:])
    out = warped_ref.clone()
    out[..., top:top + block.shape[-2], left:left + block.shape[-1]] = block
    return out


def match_pair_count(lr_hw, ref_hw, downsample: int) -> int:
    """Number of similarity evaluations when matching at 1/downsample of the reference scale."""
    return ((lr_hw[0] // downsample) * (lr_hw[1] // downsample)
            * (ref_hw[0] // downsample) * (ref_hw[1] // downsample))


def align_ref_features(ref_img: torch.Tensor, anchor_img: torch.Tensor,
                       extractor: MatchExtractor, r: int, return_index: bool = False):
    """Extract, match, gather and center-paste; output lives on the anchor's LR grid.

    ``ref_img`` is (N, 3, h, w) at r x the anchor's resolution; output has
    3*r*r channels. Both sides are matched at 4x the LR scale after taking the
    reference down to LR resolution and back, so they share the same blur.
    """
    n, _, h, w = anchor_img.shape
    hr, wr = ref_img.shape[-2:]
    if hr % r or wr % r:
        raise ValueError(f"reference {hr}x{wr} not divisible by {r}")
    s = MATCH_DOWNSAMPLE
    anchor_up = resize_bicubic_t(anchor_img, size=(h * s, w * s))
    # degrade the reference to LR sharpness before matching
    ref_lr = resize_bicubic_t(ref_img, size=(hr // r, wr // r))
    ref_up = resize_bicubic_t(ref_lr, size=(hr // r * s, wr // r * s))
    lr_feat = extractor(anchor_up)
    ref_feat = extractor(ref_up)
    idx = match_index_map(ref_feat, lr_feat)
    content = pixel_unshuffle(ref_img, r)
    out = center_paste(warp_ref(content, idx), ref_img, r)
    return (out, idx) if return_index else out


def ref_window(lr_hw, ref_hw, r: int) -> tuple[int, int, int, int]:
    """(top, left, h, w) of the reference footprint on the LR grid."""
    ph, pw = ref_hw[0] // r, ref_hw[1] // r
    top, left = paste_window(lr_hw[0], lr_hw[1], ph, pw)
    return top, left, ph, pw

