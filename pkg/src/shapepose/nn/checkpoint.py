"""Checkpoint container: named parameters, optimizer moments, step counter and config.

Stored as an uncompressed ``.npz`` archive with a JSON header entry::

    __header__          {"format": "shapepose-checkpoint", "version": 1, "step": ..., "config_hash": ...}
    param/<name>        parameter arrays
    adam_m/<name>       first moments
    adam_v/<name>       second moments
    extra/<key>         free-form arrays (template, hierarchy, spirals)
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .optim import OptimizerState

FORMAT = "shapepose-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, params: dict, state: OptimizerState | None, step: int, config: dict,
                    extra: dict | None = None, meta: dict | None = None) -> None:
    header = {"format": FORMAT, "version": VERSION, "step": int(step),
              "config_hash": config_hash(config), "config": config, "meta": meta or {}}
    if state is not None:
        header["optimizer"] = {**state.hyperparameters(), "t": state.t}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, p in params.items():
        arrays[f"param/{k}"] = getattr(p, "data", p)
    if state is not None:
        for k in state.m:
            arrays[f"adam_m/{k}"] = state.m[k]
            arrays[f"adam_v/{k}"] = state.v[k]
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Returns {"header", "params", "optimizer" (OptimizerState or None), "extra"}."""
    with np.load(path) as d:
        if "__header__" not in d:
            raise CheckpointError(f"{path}: missing header")
        header = json.loads(bytes(d["__header__"]).decode())
        if header.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        params, m, v, extra = {}, {}, {}, {}
        for key in d.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                params[name] = d[key]
            elif kind == "adam_m":
                m[name] = d[key]
            elif kind == "adam_v":
                v[name] = d[key]
            elif kind == "extra":
                extra[name] = d[key]
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    state = None
    if "optimizer" in header:
        opt = dict(header["optimizer"])
        t = opt.pop("t")
        state = OptimizerState(**opt, t=t, m=m, v=v)
    return {"header": header, "params": params, "optimizer": state, "extra": extra}
