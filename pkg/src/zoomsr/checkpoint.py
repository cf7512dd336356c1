"""Binary checkpoint format.

Layout (all integers little-endian):

    b"ZSRCKPT2"            8 bytes magic
    version                uint32
    header length          uint64
    header                 UTF-8 JSON: config echo, manifest, extra metadata
    blobs                  float32 little-endian, in manifest order

Each manifest entry records name, shape, group, a train_only flag, and its
byte offset relative to the start of the blob section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .model import TRAIN_ONLY_GROUPS, ZoomSR, param_group

MAGIC = b"ZSRCKPT2"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ZoomSR, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        group = param_group(name)
        manifest.append({"name": name, "shape": list(arr.shape), "group": group,
                         "train_only": group in TRAIN_ONLY_GROUPS, "offset": offset,
                         "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": model.cfg.to_dict(), "manifest": manifest,
                         "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        fixed = fh.read(12)
        if len(fixed) != 12:
            raise CheckpointError(f"{path}: truncated header")
        version, n = struct.unpack("<IQ", fixed)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, 20 + n


def load_checkpoint(path) -> tuple[ZoomSR, dict]:
    header, start = read_header(path)
    cfg = TrainConfig.from_dict(header["config"])
    model = ZoomSR(cfg)
    raw = Path(path).read_bytes()[start:]
    state = {}
    for e in header["manifest"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob for {e['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, header
