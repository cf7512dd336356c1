"""Self-supervised training loop, detached inference and full/corner evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .align_lr import aux_generator_objective, inject_noise, lr_to_gt_flow, patch_flow_align
from .config import TrainConfig
from .flow import FlowFailure, make_provider
from .imaging import (
    backward_warp,
    center_window,
    psnr,
    resize_bicubic,
    resize_flow,
    ssim_map,
    to_image,
    to_tensor,
)
from .losses import PerceptualPyramid, total_loss
from .model import ZoomSR
from .sim import TrainingPair, ZoomCapture, make_training_pair, transform_pair

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "aux_loss", "lr")
CSV_COLUMNS = ("id", "psnr_full", "ssim_full", "psnr_corner", "ssim_corner", "lpips")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- data

def crop_pair(pair: TrainingPair, lr_patch: int) -> TrainingPair:
    """Central lr_patch window; keeps the telephoto footprint at the patch center."""
    h, w = pair.lr.shape[:2]
    if lr_patch >= min(h, w):
        return pair
    r_t, r_w = pair.r_t, pair.r_w
    top, left = (h - lr_patch) // 2, (w - lr_patch) // 2
    if lr_patch < h // r_t or lr_patch < w // r_t:
        raise ValueError(f"lr_patch {lr_patch} is smaller than the telephoto footprint")

    def win(a, s):
        return np.ascontiguousarray(a[top * s:(top + lr_patch) * s, left * s:(left + lr_patch) * s])

    flow = None if pair.lr_flow is None else win(pair.lr_flow, 1)
    return TrainingPair(lr=win(pair.lr, 1), ref_t=pair.ref_t, gt=win(pair.gt, r_t),
                        ref_w=win(pair.ref_w, r_w), lr_flow=flow, r_w=r_w, r_t=r_t, name=pair.name)


def build_pairs(captures: list[ZoomCapture], cfg: TrainConfig) -> list[TrainingPair]:
    if not captures:
        raise ValueError("empty dataset")
    pairs = []
    for c in captures:
        if (c.r_w, c.r_t) != (cfg.r_w, cfg.r_t):
            raise ValueError(f"capture {c.name!r} has ratios {(c.r_w, c.r_t)}, config wants {(cfg.r_w, cfg.r_t)}")
        p = make_training_pair(c)
        if p.lr.shape[0] % cfg.r_t or p.lr.shape[1] % cfg.r_t:
            raise ValueError(f"capture {c.name!r}: LR {p.lr.shape[:2]} not divisible by r_t")
        pairs.append(p)
    return pairs


AUGMENTS = [(h, v, t) for h in (False, True) for v in (False, True) for t in (False, True)]


class _PairCache:
    """Warped LR per pair and reference features per (pair, augmentation)."""

    def __init__(self, pairs, cfg, provider):
        self.pairs, self.cfg, self.provider = pairs, cfg, provider
        self.warped, self.samples = {}, {}
        self.flow_failures = 0

    def _warped(self, i):
        if i not in self.warped:
            p = self.pairs[i]
            if self.cfg.alignment == "none":
                self.warped[i] = p.lr
            else:
                truth = None if p.lr_flow is None else lr_to_gt_flow(p.lr_flow, p.gt.shape[:2])
                out, ok = patch_flow_align(p.lr, p.gt, self.provider, p.r_t, truth=truth, key=p.name,
                                           interp=self.cfg.lr_warp)
                self.flow_failures += not ok
                self.warped[i] = out
        return self.warped[i]

    def get(self, i, a, model):
        key = (i, a)
        if key not in self.samples:
            p = self.pairs[i]
            aug = transform_pair(TrainingPair(lr=self._warped(i), ref_t=p.ref_t, gt=p.gt, ref_w=p.ref_w,
                                              lr_flow=None, r_w=p.r_w, r_t=p.r_t, name=p.name),
                                 *AUGMENTS[a])
            s = {k: to_tensor(getattr(aug, k)) for k in ("lr", "gt", "ref_t", "ref_w")}
            if self.cfg.match_anchor == "warped" or self.cfg.alignment != "two_stage":
                with torch.no_grad():
                    s["ref_feats"] = model.ref_features(s["lr"], s["ref_t"], s["ref_w"])
            self.samples[key] = s
        return self.samples[key]


def _stack(items, key):
    return torch.cat([s[key] for s in items], dim=0)


def _stack_feats(items):
    out = []
    for j in range(2):
        vals = [s["ref_feats"][j] for s in items]
        out.append(None if vals[0] is None else torch.cat(vals, dim=0))
    return tuple(out)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: ZoomSR
    log: list[dict]
    flow_failures: int = 0

    def losses(self) -> list[float]:
        return [row["loss"] for row in self.log]


def train(captures: list[ZoomCapture], cfg: TrainConfig, provider=None, progress=None) -> TrainResult:
    """Joint training of restoration, offset estimators and the auxiliary generator.

    Deterministic for a fixed ``cfg.seed``. ``progress(step, row)`` is called
    every ``cfg.log_every`` steps.
    """
    pairs = [crop_pair(p, cfg.lr_patch) for p in build_pairs(captures, cfg)]
    if cfg.mode == "tzsr" or cfg.mode == "rw_only":
        if any(p.ref_w is None for p in pairs):
            raise ValueError(f"mode {cfg.mode} needs wide-angle captures")
    if provider is None and cfg.alignment != "none":
        provider = make_provider(cfg.flow, cfg.flow_root or None)
    torch.manual_seed(cfg.seed)
    model = ZoomSR(cfg)
    model.flow_provider = provider
    model.train()
    phi = PerceptualPyramid()
    rng = np.random.default_rng(cfg.seed)
    tgen = torch.Generator().manual_seed(cfg.seed + 1)
    groups = model.groups()
    two_stage = cfg.alignment == "two_stage"
    main_params = groups["restoration"] + (groups["offset"] if two_stage else [])
    opt = torch.optim.Adam(main_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_aux = torch.optim.Adam(groups["aux"], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2)) if two_stage else None
    cache = _PairCache(pairs, cfg, provider)
    total = cfg.total_steps(len(pairs))
    order = []
    rows = []
    for step in range(total):
        step_lr = cfg.lr if step < cfg.decay_at * total else cfg.lr_final
        for o in (opt, opt_aux):
            if o is not None:
                for g in o.param_groups:
                    g["lr"] = step_lr
        idx = []
        while len(idx) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(pairs)))
            idx.append(int(order.pop()))
        augs = rng.integers(0, len(AUGMENTS), size=len(idx)) if cfg.augment else np.zeros(len(idx), int)
        batch = [cache.get(i, int(a), model) for i, a in zip(idx, augs)]
        lr_b, gt_b = _stack(batch, "lr"), _stack(batch, "gt")
        ref_t_b, ref_w_b = _stack(batch, "ref_t"), _stack(batch, "ref_w")

        aux_val = float("nan")
        aux_in = keep = None
        if two_stage:
            aux_out = model.aux_gen(gt_b, lr_b)
            aux_loss = aux_generator_objective(aux_out, lr_b, model.aux_gen, cfg.lambda_p)
            opt_aux.zero_grad()
            aux_loss.backward()
            opt_aux.step()
            aux_val = aux_loss.item()
            noisy = [inject_noise(np.clip(to_image(a), 0, 1), rng, cfg.noise) for a in aux_out.detach()]
            aux_in = torch.cat([to_tensor(a) for a in noisy], dim=0)
            keep = model.lr_aligner.zero_draws(len(idx), tgen)
        feats = _stack_feats(batch) if "ref_feats" in batch[0] else None
        y = model.forward_train(lr_b, aux_in, ref_t_b, ref_w_b, keep=keep, ref_feats=feats)
        loss = total_loss(y, gt_b, phi, tgen, cfg.loss, cfg.lambda_sw, cfg.losw_k, cfg.losw_stride,
                          cfg.c_proj or None, cfg.phi_stages)
        if not torch.isfinite(loss) or not math.isfinite(aux_val if two_stage else 0.0):
            raise TrainingDiverged(f"non-finite loss at step {step}: loss={loss.item()} "
                                   f"aux_loss={aux_val} lr={step_lr} batch={idx}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step, "loss": loss.item(), "aux_loss": aux_val, "lr": step_lr}
        rows.append(row)
        if progress is not None and (step % cfg.log_every == 0 or step == total - 1):
            progress(step, row)
    model.eval()
    return TrainResult(model, rows, cache.flow_failures)


def write_loss_log(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:]])
    return path


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- inference

class BicubicBaseline:
    """Stand-in model: bicubic upsampling of the LR input."""

    def __init__(self, r_t: int = 4):
        self.r_t = r_t


def check_inputs(u, t, w, r_w, r_t, needs_w):
    if t.shape[:2] != u.shape[:2]:
        raise ValueError(f"telephoto {t.shape[:2]} must match ultra-wide {u.shape[:2]} in pixels")
    if t.shape[0] % r_t or t.shape[1] % r_t:
        raise ValueError(f"telephoto dims {t.shape[:2]} not divisible by r_t={r_t}")
    if needs_w:
        if w is None:
            raise ValueError("this model needs the wide-angle image")
        if w.shape[0] % r_w or w.shape[1] % r_w:
            raise ValueError(f"wide dims {w.shape[:2]} not divisible by r_w={r_w}")
        if w.shape[0] // r_w > u.shape[0] or w.shape[1] // r_w > u.shape[1]:
            raise ValueError(f"wide {w.shape[:2]} covers more than the ultra-wide at ratio {r_w}")


@torch.no_grad()
def infer(model, u: np.ndarray, t: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Super-resolve ``u`` by r_t using the telephoto (and wide) reference; output clipped to [0, 1]."""
    if isinstance(model, BicubicBaseline):
        return resize_bicubic(u, model.r_t)
    cfg = model.cfg
    check_inputs(u, t, w, cfg.r_w, cfg.r_t, model.uses_w)
    model.eval()
    y = model.forward_test(to_tensor(u), to_tensor(t) if model.uses_t else None,
                           to_tensor(w) if model.uses_w else None)
    return np.clip(to_image(y), 0.0, 1.0)


# ---------------------------------------------------------------- evaluation

def corner_mask(h: int, w: int, r_t: int) -> np.ndarray:
    top, left, ch, cw = center_window(h, w, r_t)
    m = np.ones((h, w), bool)
    m[top:top + ch, left:left + cw] = False
    return m


def region_metrics(out: np.ndarray, ref: np.ndarray, r_t: int) -> dict:
    h, w = out.shape[:2]
    mask = corner_mask(h, w, r_t)
    mse = float(np.mean((out[mask] - ref[mask]) ** 2))
    smap = ssim_map(out, ref)
    r = (h - smap.shape[0]) // 2
    return {"psnr_full": psnr(out, ref), "ssim_full": float(smap.mean()),
            "psnr_corner": math.inf if mse == 0 else 10 * math.log10(1.0 / mse),
            "ssim_corner": float(smap[mask[r:h - r, r:w - r]].mean())}


@dataclass
class EvalReport:
    rows: list[dict]
    excluded: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        keys = CSV_COLUMNS[1:-1]
        if not self.rows:
            return {k: float("nan") for k in keys}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in keys}

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.meta.items():
            buf.write(f"# {k}={v}\n")
        buf.write(f"# excluded={len(self.excluded)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows + [dict(self.summary, id="mean")]:
            w.writerow([r["id"]] + [f"{r[k]:.6f}" for k in CSV_COLUMNS[1:-1]] + [""])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def read_eval_csv(path) -> tuple[list[dict], dict]:
    lines = Path(path).read_text().splitlines()
    meta = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        else:
            body.append(line)
    rows = []
    for r in csv.DictReader(body):
        rows.append({k: (r[k] if k in ("id", "lpips") else float(r[k])) for k in r})
    return rows, meta


def evaluate(model, captures: list[ZoomCapture], provider=None, r_t: int | None = None,
             meta: dict | None = None) -> EvalReport:
    """Infer on (u_c, t_c[, w_c]), align t onto the output, score full and corner regions."""
    if provider is None:
        provider = make_provider("oracle")
    rows, excluded = [], []
    for c in captures:
        p = make_training_pair(c)
        y = infer(model, p.lr, p.ref_t, p.ref_w)
        truth = None if p.lr_flow is None else resize_flow(p.lr_flow, y.shape[:2])
        try:
            flow = provider.estimate(p.gt, y, truth=truth, key=p.name)
        except FlowFailure as exc:
            log.warning("excluding %s: %s", p.name, exc)
            excluded.append(p.name)
            continue
        aligned = backward_warp(p.gt, flow)
        rows.append(dict(region_metrics(y, aligned, r_t or c.r_t), id=p.name))
    return EvalReport(rows, excluded, dict(meta or {}))
