"""zoomsr command line: simulate, train, infer, eval, report.

Exit codes: 0 ok, 1 runtime failure, 2 usage error. Failures print one line
on stderr of the form ``zoomsr: error: code=<n> type=<kind> message=<text>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

RUN_DIR_ENV = "ZSR_RUN_DIR"
DEFAULT_RUN_DIR = "run"

log = logging.getLogger("zoomsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"zoomsr: error: code={code} type={exc.__class__.__name__} message={json.dumps(msg)}",
          file=sys.stderr)
    return code


def run_dir(args) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    return Path(os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_DIR)


def write_echo(rd: Path, name: str, text: str) -> Path:
    rd.mkdir(parents=True, exist_ok=True)
    p = rd / name
    p.write_text(text)
    return p


def _kv_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    from .sim import CaptureParams, simulate_dataset, write_capture_dir
    if args.scenes < 1:
        raise UsageError("--scenes must be positive")
    params = CaptureParams(blur_sigma=args.blur, parallax_amplitude=args.parallax,
                           noise_sigma=args.noise, r_w=args.r_w, r_t=args.r_t)
    size = (args.scene_size, args.scene_size)
    caps = simulate_dataset(args.scenes, args.seed, params, size, gain_jitter=args.gain_jitter)
    out = Path(args.out)
    write_echo(out, "simulate.txt", "".join(f"{k}={v}\n" for k, v in sorted(vars(args).items())
                                          if k != "func"))
    write_capture_dir(out, caps)
    print(f"wrote {len(caps)} scenes to {out}")
    return 0


def _load_data(path, cfg, with_truth):
    from .sim import load_capture_dir
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"data directory {p} does not exist")
    caps = load_capture_dir(p, cfg.r_w, cfg.r_t, load_truth=with_truth)
    if not caps:
        raise RuntimeError(f"no complete scenes under {p}")
    return caps


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import make_config
    from .flow import make_provider
    from .train import train, write_loss_log
    over = {k: getattr(args, k) for k in ("seed", "mode", "alignment", "loss", "fusion", "steps",
                                          "flow", "noise", "batch_size", "lr_patch")}
    if args.flow_root:
        over["flow_root"] = args.flow_root
    over.update(_kv_overrides(args.set))
    try:
        cfg = make_config(args.preset, args.config, over)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    rd = run_dir(args)
    write_echo(rd, "config.txt", cfg.to_text())
    caps = _load_data(args.data, cfg, with_truth=cfg.flow == "oracle")
    provider = None if cfg.alignment == "none" else make_provider(cfg.flow, cfg.flow_root or None)
    res = train(caps, cfg, provider,
                progress=lambda s, r: log.info("step %d loss %.5f aux %.5f", s, r["loss"], r["aux_loss"]))
    write_loss_log(rd / "loss_log.csv", res.log)
    save_checkpoint(rd / "checkpoint.zsr", res.model,
                    extra={"scenes": [c.name for c in caps], "flow_failures": res.flow_failures})
    print(f"checkpoint {rd / 'checkpoint.zsr'}")
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .imaging import read_png, write_png
    from .train import infer
    rd = run_dir(args)
    write_echo(rd, "infer.txt", "".join(f"{k}={v}\n" for k, v in sorted(vars(args).items())
                                        if k != "func"))
    model, _ = load_checkpoint(args.ckpt)
    u = read_png(args.ultrawide)
    t = read_png(args.tele)
    w = read_png(args.wide) if args.wide else None
    y = infer(model, u, t, w)
    out = Path(args.out) if args.out else rd / f"{Path(args.ultrawide).stem}_sr.png"
    write_png(out, y)
    print(f"wrote {out} ({y.shape[1]}x{y.shape[0]})")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import TrainConfig
    from .flow import make_provider
    from .train import BicubicBaseline, evaluate
    if bool(args.ckpt) == bool(args.baseline):
        raise UsageError("give exactly one of --ckpt or --baseline")
    rd = run_dir(args)
    if args.ckpt:
        model, header = load_checkpoint(args.ckpt)
        cfg = model.cfg
        meta = {f"config.{k}": v for k, v in sorted(cfg.to_dict().items())}
        meta["checkpoint"] = args.ckpt
    else:
        cfg = TrainConfig(r_w=args.r_w, r_t=args.r_t)
        model = BicubicBaseline(cfg.r_t)
        meta = {"baseline": "bicubic", "r_t": cfg.r_t}
    meta.update(flow=args.flow, data=args.data)
    write_echo(rd, "eval_config.txt", "".join(f"{k}={v}\n" for k, v in meta.items()))
    caps = _load_data(args.data, cfg, with_truth=args.flow == "oracle")
    provider = make_provider(args.flow, args.flow_root or None)
    rep = evaluate(model, caps, provider, cfg.r_t, meta=meta)
    out = Path(args.out) if args.out else rd / "metrics.csv"
    rep.write(out)
    s = rep.summary
    print(f"{out}: psnr_full={s['psnr_full']:.3f} psnr_corner={s['psnr_corner']:.3f} "
          f"excluded={len(rep.excluded)}")
    return 0


def cmd_report(args) -> int:
    from . import report
    from .train import read_eval_csv, read_loss_log
    rd = run_dir(args)
    out = Path(args.out) if args.out else rd / "report"
    log_path = rd / "loss_log.csv"
    if not log_path.exists():
        raise FileNotFoundError(f"no loss log at {log_path}")
    written = [report.plot_loss_curve(read_loss_log(log_path), out / "loss_curve.png")]
    arms = []
    labels = args.labels or []
    metric_files = args.metrics or ([rd / "metrics.csv"] if (rd / "metrics.csv").exists() else [])
    for i, m in enumerate(metric_files):
        rows, _ = read_eval_csv(m)
        summary = next((r for r in rows if r["id"] == "mean"), None)
        if summary is None:
            raise ValueError(f"{m}: no summary row")
        arms.append((labels[i] if i < len(labels) else Path(m).stem, summary))
    if arms:
        written.append(report.plot_ablation(arms, out / "ablation.png"))
        written.append(report.write_summary_csv(out / "summary.csv", arms))
    if args.ckpt and args.data:
        written.append(_montage(args, out / "montage.png"))
    for p in written:
        print(p)
    return 0


def _montage(args, path):
    from . import report
    from .checkpoint import load_checkpoint
    from .sim import make_training_pair
    from .train import infer
    model, _ = load_checkpoint(args.ckpt)
    caps = _load_data(args.data, model.cfg, with_truth=True)[: args.montage_scenes]
    r_t = model.cfg.r_t
    rows = []
    for c in caps:
        p = make_training_pair(c)
        y = infer(model, p.lr, p.ref_t, p.ref_w)
        size = (y.shape[0] // 2) // r_t * r_t
        rows.append((p.name, report.montage_panels(p.lr, y, p.gt, p.lr_flow, r_t, (0, 0, size))))
    return report.plot_montage(rows, path)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="zoomsr", description="Self-supervised reference-based zoom super-resolution.")
    ap.add_argument("--log-level", default="WARNING", help="python logging level")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_run_dir(p):
        p.add_argument("--run-dir", help=f"run directory (default: ${RUN_DIR_ENV} or ./{DEFAULT_RUN_DIR})")
        return p

    s = sub.add_parser("simulate", help="write a synthetic multi-zoom dataset")
    s.add_argument("--scenes", type=int, default=20, help="number of scenes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--parallax", type=float, default=3.0, help="parallax amplitude in lens pixels")
    s.add_argument("--noise", type=float, default=10 / 255, help="noise standard deviation")
    s.add_argument("--blur", type=float, default=1.0, help="optical blur sigma in scene pixels")
    s.add_argument("--gain-jitter", type=float, default=0.1, help="per-channel color gain spread")
    s.add_argument("--scene-size", type=int, default=256, help="latent scene side length")
    s.add_argument("--r-w", type=int, default=2)
    s.add_argument("--r-t", type=int, default=4)
    s.set_defaults(func=cmd_simulate)

    t = with_run_dir(sub.add_parser("train", help="self-supervised training"))
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--preset", default="desk", choices=("paper", "desk", "large"))
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--mode", choices=("dzsr", "tzsr", "rw_only"))
    t.add_argument("--alignment", choices=("none", "flow", "two_stage"))
    t.add_argument("--loss", choices=("l1", "sw", "losw"))
    t.add_argument("--fusion", choices=("w_then_t", "t_then_w", "concat"))
    t.add_argument("--flow", choices=("oracle", "classical", "external"))
    t.add_argument("--flow-root", help="directory of external .zsflow files")
    t.add_argument("--noise", choices=("none", "jpeg", "gaussian", "both"), help="auxiliary-LR noise")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-patch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key (repeatable)")
    t.set_defaults(func=cmd_train)

    i = with_run_dir(sub.add_parser("infer", help="super-resolve one capture"))
    i.add_argument("--ckpt", required=True)
    i.add_argument("--ultrawide", required=True)
    i.add_argument("--tele", required=True)
    i.add_argument("--wide")
    i.add_argument("--out", help="output PNG (default: <run-dir>/<ultrawide stem>_sr.png)")
    i.set_defaults(func=cmd_infer)

    e = with_run_dir(sub.add_parser("eval", help="full/corner PSNR and SSIM"))
    e.add_argument("--ckpt")
    e.add_argument("--baseline", choices=("bicubic",))
    e.add_argument("--data", required=True)
    e.add_argument("--flow", default="oracle", choices=("oracle", "classical", "external"))
    e.add_argument("--flow-root")
    e.add_argument("--r-w", type=int, default=2, help="ratios for --baseline")
    e.add_argument("--r-t", type=int, default=4, help="ratios for --baseline")
    e.add_argument("--out", help="CSV path (default: <run-dir>/metrics.csv)")
    e.set_defaults(func=cmd_eval)

    r = with_run_dir(sub.add_parser("report", help="loss curve, ablation bars and crop montage"))
    r.add_argument("--metrics", nargs="+", help="eval CSVs, one per arm, plotted in this order")
    r.add_argument("--labels", nargs="+", help="arm names for --metrics")
    r.add_argument("--ckpt", help="checkpoint for the crop montage")
    r.add_argument("--data", help="dataset for the crop montage")
    r.add_argument("--montage-scenes", type=int, default=3)
    r.add_argument("--out", help="output directory (default: <run-dir>/report)")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as exc:
        return _fail(2, exc)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(2, exc)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
