"""Training objectives: l1, sliced Wasserstein and its local overlapped variant."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LOSS_ARMS = ("l1", "sw", "losw")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def projection_matrix(c_out: int, c: int, gen: torch.Generator | None = None,
                      dtype=torch.float32) -> torch.Tensor:
    """C' x C matrix with rows uniform on the unit sphere."""
    m = torch.randn(c_out, c, generator=gen, dtype=dtype)
    return m / m.norm(dim=1, keepdim=True)


def _sliced(U, V, M, kernel, stride):
    if U.shape != V.shape:
        raise ValueError(f"shape mismatch {tuple(U.shape)} vs {tuple(V.shape)}")
    if U.dim() == 3:
        U, V = U[None], V[None]
    n, c = U.shape[:2]
    kk = kernel[0] * kernel[1]
    # (N, C*k*k, L) -> (N, L, C, k*k) with L the patch count
    up = F.unfold(U, kernel, stride=stride).view(n, c, kk, -1).permute(0, 3, 1, 2)
    vp = F.unfold(V, kernel, stride=stride).view(n, c, kk, -1).permute(0, 3, 1, 2)
    M = M.to(U.dtype)
    ud = torch.einsum("dc,nlck->nldk", M, up)
    vd = torch.einsum("dc,nlck->nldk", M, vp)
    us, _ = torch.sort(ud, dim=-1)
    vs, _ = torch.sort(vd, dim=-1)
    return (us - vs).abs().mean()


def losw_loss(U: torch.Tensor, V: torch.Tensor, M: torch.Tensor, k: int = 8,
              stride: int = 4) -> torch.Tensor:
    """Local overlapped sliced Wasserstein distance between feature maps.

    Both inputs are unfolded into overlapping k x k patches, every patch is
    projected onto the rows of ``M``, each projection is sorted over its k*k
    samples, and the sorted tensors are compared with a mean absolute
    difference.
    """
    h, w = U.shape[-2:]
    if k < 1 or stride < 1 or stride >= k:
        raise ValueError(f"need 1 <= stride < k, got k={k} stride={stride}")
    if k > min(h, w):
        raise ValueError(f"patch size {k} exceeds feature map {h}x{w}")
    return _sliced(U, V, M, (k, k), stride)


def sw_loss(U: torch.Tensor, V: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Global sliced Wasserstein: one patch covering the whole map."""
    h, w = U.shape[-2:]
    return _sliced(U, V, M, (h, w), 1)


class PerceptualPyramid(nn.Module):
    """Frozen random conv pyramid standing in for a pretrained feature network."""

    def __init__(self, widths=(16, 32, 32), seed: int = 4321):
        super().__init__()
        stages, ci = [], 3
        for i, co in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(nn.Conv2d(ci, co, 3, stride=stride, padding=1), nn.ReLU(),
                                        nn.Conv2d(co, co, 3, padding=1), nn.ReLU()))
            ci = co
        self.stages = nn.ModuleList(stages)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def total_loss(y_hat: torch.Tensor, target: torch.Tensor, phi: PerceptualPyramid | None,
               gen: torch.Generator | None, arm: str = "losw", lambda_sw: float = 0.08,
               k: int = 8, stride: int = 4, c_proj: int | None = None,
               stages=(0, 1, 2)) -> torch.Tensor:
    """l1 plus ``lambda_sw`` times (LO)SW on the selected pyramid stages.

    A fresh projection matrix is drawn from ``gen`` for every stage on every call.
    """
    if arm not in LOSS_ARMS:
        raise ValueError(f"loss arm must be one of {LOSS_ARMS}")
    loss = l1_loss(y_hat, target)
    if arm == "l1" or lambda_sw == 0:
        return loss
    fy, ft = phi(y_hat), phi(target)
    extra = y_hat.new_zeros(())
    for s in stages:
        U, V = fy[s], ft[s]
        c = U.shape[1]
        M = projection_matrix(c_proj or c, c, gen, dtype=U.dtype)
        if arm == "sw":
            extra = extra + sw_loss(U, V, M)
        else:
            kk = min(k, *U.shape[-2:])
            extra = extra + losw_loss(U, V, M, kk, min(stride, max(kk - 1, 1)))
    return loss + lambda_sw * extra
