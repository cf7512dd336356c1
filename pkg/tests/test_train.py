import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from zoomsr.config import make_config
from zoomsr.flow import FlowFailure, OracleFlow
from zoomsr.imaging import psnr, ssim
from zoomsr.sim import CaptureParams, simulate_dataset
from zoomsr.train import (
    CSV_COLUMNS,
    BicubicBaseline,
    EvalReport,
    TrainingDiverged,
    _PairCache,
    build_pairs,
    corner_mask,
    crop_pair,
    evaluate,
    infer,
    read_eval_csv,
    read_loss_log,
    region_metrics,
    train,
    write_loss_log,
)

TINY = dict(channels=8, n_blocks=2, batch_size=2, steps=4, match_channels=8, aux_width=8, log_every=1)


@pytest.fixture(scope="module")
def data():
    return simulate_dataset(3, 5, CaptureParams())


def tiny_cfg(**kw):
    return make_config("desk", overrides={**TINY, **kw})


class Poison:
    """Stands in for anything that must not run at inference time."""

    def __getattr__(self, name):
        raise AssertionError(f"inference touched a train-only component ({name})")


class PoisonModule(nn.Module):
    def forward(self, *a, **k):
        raise AssertionError("inference called a train-only module")


# ---------------------------------------------------------------- training

def test_same_seed_same_trace(data):
    a = train(data, tiny_cfg(seed=3))
    b = train(data, tiny_cfg(seed=3))
    assert a.losses() == b.losses()
    c = train(data, tiny_cfg(seed=4))
    assert a.losses() != c.losses()


@pytest.mark.parametrize("over", [dict(mode="tzsr"), dict(mode="rw_only"), dict(alignment="none"),
                                  dict(alignment="flow"), dict(loss="sw"), dict(loss="l1"),
                                  dict(match_anchor="aux"), dict(fusion="concat", mode="tzsr")])
def test_arms_train(data, over):
    res = train(data, tiny_cfg(steps=2, **over))
    assert len(res.log) == 2 and all(math.isfinite(r["loss"]) for r in res.log)
    assert not res.model.training


def test_progress_callback(data):
    seen = []
    train(data, tiny_cfg(steps=3, log_every=2), progress=lambda s, r: seen.append(s))
    assert seen == [0, 2]


def test_nonfinite_loss_aborts(data):
    bad = [c for c in data]
    bad[0] = simulate_dataset(1, 5, CaptureParams())[0]
    bad[0].tele = bad[0].tele.copy()
    bad[0].tele[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(bad[:1], tiny_cfg(steps=2, batch_size=1, augment=False))


def test_dataset_checks(data):
    with pytest.raises(ValueError):
        build_pairs([], tiny_cfg())
    with pytest.raises(ValueError):
        build_pairs(data, tiny_cfg(r_w=3, r_t=8))
    odd = simulate_dataset(1, 1, CaptureParams())[0]
    odd.ultra_wide = odd.ultra_wide[:62, :62]
    with pytest.raises(ValueError):
        build_pairs([odd], tiny_cfg())


def test_lr_warp_option(data):
    with pytest.raises(ValueError):
        tiny_cfg(lr_warp="cubic")
    pairs = build_pairs(data[:1], tiny_cfg())
    a = _PairCache(pairs, tiny_cfg(), OracleFlow())._warped(0)
    b = _PairCache(pairs, tiny_cfg(lr_warp="nearest"), OracleFlow())._warped(0)
    assert a.shape == b.shape and not np.allclose(a, b)
    # whole-pixel moves keep every value of the captured LR
    assert np.isin(b, pairs[0].lr).all()


def test_crop_pair_keeps_geometry(data):
    p = build_pairs(data, tiny_cfg())[0]
    c = crop_pair(p, 8)
    assert c.lr.shape[:2] == (8, 8) and c.gt.shape[:2] == (32, 32) and c.ref_w.shape[:2] == (16, 16)
    np.testing.assert_array_equal(c.lr, p.lr[4:12, 4:12])
    np.testing.assert_array_equal(c.gt, p.gt[16:48, 16:48])
    assert crop_pair(p, 64) is p
    with pytest.raises(ValueError):
        crop_pair(p, 2)


def test_loss_log_roundtrip(tmp_path, data):
    res = train(data, tiny_cfg(steps=3))
    path = write_loss_log(tmp_path / "loss.csv", res.log)
    back = read_loss_log(path)
    assert [r["loss"] for r in back] == res.losses()
    assert [r["step"] for r in back] == [0, 1, 2]


# ---------------------------------------------------------------- inference

@pytest.fixture(scope="module")
def trained(data):
    return train(data, tiny_cfg(steps=3, mode="tzsr")).model


def test_infer_dims(trained, data):
    p = build_pairs(data, trained.cfg)[0]
    y = infer(trained, p.lr, p.ref_t, p.ref_w)
    assert y.shape == (64, 64, 3) and y.min() >= 0 and y.max() <= 1
    big = np.random.default_rng(0).random((24, 32, 3))
    assert infer(trained, big, big, big[:24, :32]).shape == (96, 128, 3)


def test_infer_input_checks(trained):
    u = np.zeros((16, 16, 3))
    with pytest.raises(ValueError):
        infer(trained, u, np.zeros((16, 12, 3)), u)
    with pytest.raises(ValueError):
        infer(trained, u, u, None)
    with pytest.raises(ValueError):
        infer(trained, np.zeros((18, 18, 3)), np.zeros((18, 18, 3)), np.zeros((18, 18, 3)))
    with pytest.raises(ValueError):
        infer(trained, u, u, np.zeros((40, 40, 3)))


def test_inference_survives_poisoned_train_only_parts(trained, data):
    p = build_pairs(data, trained.cfg)[1]
    before = infer(trained, p.lr, p.ref_t, p.ref_w)
    saved = (trained.flow_provider, trained.aux_gen, trained.lr_aligner.aux_head,
             [s.estimator for s in trained.lr_aligner.stages])
    try:
        trained.flow_provider = Poison()
        trained.aux_gen = PoisonModule()
        trained.lr_aligner.aux_head = PoisonModule()
        for s in trained.lr_aligner.stages:
            s.estimator = PoisonModule()
        after = infer(trained, p.lr, p.ref_t, p.ref_w)
    finally:
        trained.flow_provider, trained.aux_gen, trained.lr_aligner.aux_head, est = saved
        for s, e in zip(trained.lr_aligner.stages, est):
            s.estimator = e
    assert np.array_equal(before, after)


def test_train_path_with_all_offsets_zeroed_matches_inference(trained, data):
    p = build_pairs(data, trained.cfg)[2]
    from zoomsr.imaging import to_tensor
    lr, t, w = to_tensor(p.lr), to_tensor(p.ref_t), to_tensor(p.ref_w)
    aux = torch.rand_like(lr)
    keep = torch.zeros(len(trained.lr_aligner.stages), 1)
    with torch.no_grad():
        y_train = trained.forward_train(lr, aux, t, w, keep=keep)
        y_test = trained.forward_test(lr, t, w)
    assert torch.equal(y_train, y_test)


def test_train_only_groups_are_exactly_the_difference(trained):
    """Parameters that receive gradient only on the training path are the flagged groups."""
    from zoomsr.imaging import to_tensor
    from zoomsr.model import TRAIN_ONLY_GROUPS, param_group
    from zoomsr.align_lr import aux_generator_objective
    p = build_pairs(simulate_dataset(1, 9, CaptureParams()), trained.cfg)[0]
    lr, t, w, gt = (to_tensor(a) for a in (p.lr, p.ref_t, p.ref_w, p.gt))

    def touched(fn):
        trained.zero_grad(set_to_none=True)
        fn().backward()
        return {n for n, q in trained.named_parameters() if q.grad is not None and q.grad.abs().sum() > 0}

    test_set = touched(lambda: trained.forward_test(lr, t, w).sum())
    ones = torch.ones(len(trained.lr_aligner.stages), 1)

    def train_loss():
        aux = trained.aux_gen(gt, lr)
        return (trained.forward_train(lr, aux, t, w, keep=ones).sum()
                + aux_generator_objective(aux, lr, trained.aux_gen, 1.0))

    # force nonzero offsets so the estimators are live
    with torch.no_grad():
        saved = [s.estimator.body[-1].bias.clone() for s in trained.lr_aligner.stages]
        for s in trained.lr_aligner.stages:
            s.estimator.body[-1].bias.add_(0.1)
    try:
        train_set = touched(train_loss)
    finally:
        with torch.no_grad():
            for s, b in zip(trained.lr_aligner.stages, saved):
                s.estimator.body[-1].bias.copy_(b)
        trained.zero_grad(set_to_none=True)
    diff = train_set - test_set
    assert diff and all(param_group(n) in TRAIN_ONLY_GROUPS for n in diff)
    assert not any(param_group(n) in TRAIN_ONLY_GROUPS for n in test_set)


# ---------------------------------------------------------------- evaluation

def test_corner_mask_area():
    for h, w, r in [(64, 64, 4), (48, 80, 4), (30, 30, 2)]:
        m = corner_mask(h, w, r)
        assert m.sum() == h * w - (h // r) * (w // r)


def test_region_metrics_hand_case():
    rng = np.random.default_rng(0)
    ref = rng.random((32, 32, 3))
    out = ref.copy()
    out[12:20, 12:20] += 0.1            # only the center differs
    m = region_metrics(np.clip(out, 0, 1), ref, 4)
    assert m["psnr_corner"] == math.inf
    assert m["psnr_full"] == pytest.approx(psnr(np.clip(out, 0, 1), ref))
    assert m["ssim_full"] == pytest.approx(ssim(np.clip(out, 0, 1), ref))


def test_metrics_flip_invariant():
    rng = np.random.default_rng(1)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    m1, m2 = region_metrics(a, b, 4), region_metrics(a[:, ::-1], b[:, ::-1], 4)
    for k in m1:
        assert m1[k] == pytest.approx(m2[k], abs=1e-10)


def test_bicubic_baseline_on_aligned_clean_data():
    clean = simulate_dataset(6, 11, CaptureParams(noise_sigma=0, parallax_amplitude=0), gain_jitter=0)
    rep = evaluate(BicubicBaseline(), clean)
    s = rep.summary
    assert all(math.isfinite(v) for v in s.values())
    assert abs(s["psnr_corner"] - s["psnr_full"]) < 0.5


class FailingOn:
    def __init__(self, names):
        self.names, self.inner = set(names), OracleFlow()

    def estimate(self, src, dst, truth=None, key=None):
        if key in self.names:
            raise FlowFailure("boom")
        return self.inner.estimate(src, dst, truth=truth, key=key)


def test_flow_failures_are_excluded_and_counted(data):
    rep = evaluate(BicubicBaseline(), data, provider=FailingOn({"scene_001"}))
    assert rep.excluded == ["scene_001"]
    assert [r["id"] for r in rep.rows] == ["scene_000", "scene_002"]
    assert "# excluded=1" in rep.to_csv()


def test_eval_csv_format(tmp_path, data):
    rep = evaluate(BicubicBaseline(), data, meta={"model": "bicubic", "r_t": 4})
    path = rep.write(tmp_path / "m.csv")
    text = path.read_text().splitlines()
    assert text[0] == "# model=bicubic" and text[2] == "# excluded=0"
    assert text[3] == ",".join(CSV_COLUMNS)
    rows, meta = read_eval_csv(path)
    assert meta["model"] == "bicubic"
    assert [r["id"] for r in rows][-1] == "mean"
    assert all(r["lpips"] == "" for r in rows)
    assert rows[-1]["psnr_full"] == pytest.approx(rep.summary["psnr_full"], abs=1e-6)


def test_empty_report_summary():
    rep = EvalReport([], ["a"])
    assert all(math.isnan(v) for v in rep.summary.values())
