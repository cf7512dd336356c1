"""Run configuration: presets, key=value files and flag overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

ALIGNMENT_ARMS = ("none", "flow", "two_stage")
MATCH_ANCHORS = ("warped", "aux")


@dataclass
class TrainConfig:
    preset: str = "paper"
    seed: int = 0
    mode: str = "dzsr"
    r_w: int = 2
    r_t: int = 4
    # optimisation
    batch_size: int = 16
    lr_patch: int = 48
    epochs: int = 400
    steps: int = 0              # > 0 overrides epochs
    lr: float = 1e-4
    lr_final: float = 5e-5
    decay_at: float = 0.5       # fraction of the run after which lr_final applies
    beta1: float = 0.9
    beta2: float = 0.999
    augment: bool = True
    # network
    channels: int = 64
    n_blocks: int = 16
    fusion: str = "w_then_t"
    split: int = -1             # -1 -> n_blocks // 2
    match_channels: int = 32
    match_anchor: str = "warped"
    # LR/GT alignment
    alignment: str = "two_stage"
    flow: str = "oracle"
    flow_root: str = ""
    lr_warp: str = "bilinear"
    aux_width: int = 32
    lambda_p: float = 100.0
    noise: str = "both"
    p_zero: float = 0.3
    n_stages: int = 3
    # loss
    loss: str = "losw"
    lambda_sw: float = 0.08
    losw_k: int = 8
    losw_stride: int = 4
    c_proj: int = 0             # 0 -> same as feature channels
    phi_stages: tuple = (0, 1, 2)
    log_every: int = 50

    def __post_init__(self):
        from .losses import LOSS_ARMS
        from .restoration import FUSION_ORDERS, REF_MODES
        from .align_lr import LR_WARPS, NOISE_MODES
        checks = [("mode", REF_MODES), ("fusion", FUSION_ORDERS), ("alignment", ALIGNMENT_ARMS),
                  ("noise", NOISE_MODES), ("loss", LOSS_ARMS), ("match_anchor", MATCH_ANCHORS),
                  ("flow", ("oracle", "classical", "external")), ("lr_warp", LR_WARPS)]
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.r_t <= self.r_w or self.r_w < 1:
            raise ValueError("need r_t > r_w >= 1")
        if self.batch_size < 1 or self.lr_patch < 1:
            raise ValueError("batch_size and lr_patch must be positive")
        if not 0 <= self.p_zero <= 1:
            raise ValueError("p_zero must lie in [0, 1]")
        self.phi_stages = tuple(int(s) for s in self.phi_stages)

    @property
    def block_split(self) -> int:
        return self.n_blocks // 2 if self.split < 0 else self.split

    def total_steps(self, n_pairs: int) -> int:
        if self.steps > 0:
            return self.steps
        per_epoch = max(1, -(-n_pairs // self.batch_size))
        return self.epochs * per_epoch

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phi_stages"] = list(self.phi_stages)
        return d

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: _coerce(k, v) for k, v in d.items()})


PRESETS = {
    "paper": {},
    "desk": dict(batch_size=8, lr_patch=16, steps=3000, lr=5e-4, lr_final=2.5e-4,
                 channels=32, c_proj=8, phi_stages=(1, 2)),
    "large": dict(batch_size=8, lr_patch=16, steps=3000, lr=5e-4, lr_final=2.5e-4,
                  channels=64, n_blocks=48, c_proj=8, phi_stages=(1, 2)),
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return tuple(value) if key == "phi_stages" else value
    kind = _FIELD_TYPES[key]
    value = value.strip()
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {value!r}")
    if kind == "tuple":
        return tuple(int(x) for x in value.split(",") if x.strip())
    return value


def parse_kv(text: str) -> dict:
    """key=value lines; blank lines and '#' comments ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def make_config(preset: str = "paper", file=None, overrides: dict | None = None) -> TrainConfig:
    """defaults < preset < file < overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[preset], preset=preset)
    if file:
        file_vals = parse_kv(Path(file).read_text())
        if "preset" in file_vals and file_vals["preset"] != preset:
            merged = dict(PRESETS[file_vals["preset"]], preset=file_vals["preset"])
        merged.update(file_vals)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(merged)
