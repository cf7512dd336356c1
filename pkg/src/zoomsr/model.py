"""The full zoom SR model: LR aligner, auxiliary generator, matcher and restorer."""
from __future__ import annotations

import torch
import torch.nn as nn

from .align_lr import AuxGenerator, LRAligner
from .align_ref import MatchExtractor, align_ref_features, ref_window
from .config import TrainConfig
from .restoration import Restorer

TRAIN_ONLY_GROUPS = ("aux", "offset")


def aux_strides(r_t: int, n_layers: int = 5) -> tuple[int, ...]:
    if r_t < 1 or r_t & (r_t - 1):
        raise ValueError("r_t must be a power of two")
    twos = r_t.bit_length() - 1
    if twos > n_layers:
        raise ValueError("too few generator layers for this scale")
    return (2,) * twos + (1,) * (n_layers - twos)


def param_group(name: str) -> str:
    if name.startswith("aux_gen."):
        return "aux"
    if name.startswith("lr_aligner.aux_head.") or ".estimator." in name:
        return "offset"
    if name.startswith("match_extractor."):
        return "frozen"
    return "restoration"


def lr_center(lr: torch.Tensor, ref: torch.Tensor, r: int) -> torch.Tensor:
    """The part of ``lr`` that shares its field of view with ``ref``."""
    top, left, ph, pw = ref_window(lr.shape[-2:], ref.shape[-2:], r)
    return lr[..., top:top + ph, left:left + pw]


class ZoomSR(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.lr_aligner = LRAligner(c, cfg.n_stages, cfg.p_zero)
        self.aux_gen = AuxGenerator(cfg.aux_width, aux_strides(cfg.r_t), seed=cfg.seed)
        self.match_extractor = MatchExtractor(cfg.match_channels)
        self.restorer = Restorer(c, cfg.n_blocks, cfg.r_t, cfg.r_w, cfg.mode, cfg.fusion,
                                 cfg.block_split)
        # not a module: providers are plain objects and never part of a checkpoint
        self.flow_provider = None

    @property
    def uses_t(self):
        return self.restorer.uses_t

    @property
    def uses_w(self):
        return self.restorer.uses_w

    def groups(self) -> dict[str, list[nn.Parameter]]:
        out = {"restoration": [], "offset": [], "aux": [], "frozen": []}
        for name, p in self.named_parameters():
            out[param_group(name)].append(p)
        return out

    def ref_features(self, anchor, ref_t=None, ref_w=None):
        cfg = self.cfg
        ft = fw = None
        if self.uses_t:
            ft = align_ref_features(ref_t, anchor, self.match_extractor, cfg.r_t)
        if self.uses_w:
            fw = align_ref_features(ref_w, anchor, self.match_extractor, cfg.r_w)
        return ft, fw

    def restore(self, lr, feats, ft, fw, ref_t, ref_w):
        if self.cfg.mode == "rw_only":
            ref_img, r = ref_w, self.cfg.r_w
        else:
            ref_img, r = ref_t, self.cfg.r_t
        return self.restorer(lr, feats, ft, fw, ref_img, lr_center(lr, ref_img, r))

    def forward_test(self, lr, ref_t=None, ref_w=None, ref_feats=None):
        """Inference path: u is the anchor and every AdaSTN stage runs with P = 0."""
        if self.uses_w and ref_w is None:
            raise ValueError(f"mode {self.cfg.mode} needs the wide-angle reference")
        if self.uses_t and ref_t is None:
            raise ValueError(f"mode {self.cfg.mode} needs the telephoto reference")
        feats = self.lr_aligner(lr, mode="test")
        ft, fw = ref_feats if ref_feats is not None else self.ref_features(lr, ref_t, ref_w)
        return self.restore(lr, feats, ft, fw, ref_t, ref_w)

    def forward_train(self, warped_lr, aux_lr, ref_t=None, ref_w=None, keep=None, ref_feats=None):
        if aux_lr is None:
            feats = self.lr_aligner(warped_lr, mode="test")
        else:
            feats = self.lr_aligner(warped_lr, aux_lr, mode="train", keep=keep)
        if ref_feats is None:
            anchor = aux_lr if (self.cfg.match_anchor == "aux" and aux_lr is not None) else warped_lr
            ref_feats = self.ref_features(anchor, ref_t, ref_w)
        ft, fw = ref_feats
        return self.restore(warped_lr, feats, ft, fw, ref_t, ref_w)
