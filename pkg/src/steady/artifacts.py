"""Checkpoint files shared by every method.

A checkpoint is an ``.npz`` archive holding the network tensors plus a
JSON ``meta`` record (method, config hash, dataset hash, code version,
seed). Training checkpoints additionally hold the optimizer moments and
the step counter so a run can be resumed. The analytic hand model is
represented by a JSON marker file carrying the same meta record.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .neural import PARAMS_FORMAT_VERSION, DynamicsParams
from .trainer import AdamState, TrainRun

HAND_MARKER_KIND = "analytic_hand_model"


def base_meta(method, cfg, **extra):
    return {"method": method, "config_hash": cfg.hash(), "data_hash": cfg.data_hash(),
            "code_version": __version__, "seed": cfg.train.seed, **extra}


def save_checkpoint(path, params: DynamicsParams, meta, adam: AdamState | None = None, step=None):
    arrays = dict(params.tensors())
    if adam is not None:
        arrays.update({f"adam_m_{k}": v for k, v in adam.m.tensors().items()})
        arrays.update({f"adam_v_{k}": v for k, v in adam.v.tensors().items()})
        meta = {**meta, "adam": {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                                 "beta2": adam.beta2, "eps_hat": adam.eps_hat}}
    if step is not None:
        meta = {**meta, "step": int(step)}
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, format_version=PARAMS_FORMAT_VERSION, meta=json.dumps(meta, sort_keys=True), **arrays)
    tmp.replace(path)


def save_hand_marker(path, meta, hov):
    from dataclasses import asdict

    rec = {"kind": HAND_MARKER_KIND, "hov_params": asdict(hov), "meta": meta}
    Path(path).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(params or None, meta)``; ``params`` is None for the hand marker."""
    path = Path(path)
    if path.suffix == ".json":
        rec = json.loads(path.read_text())
        if rec.get("kind") != HAND_MARKER_KIND:
            raise ValueError(f"{path}: not a model artifact")
        return None, rec["meta"]
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != PARAMS_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        meta = json.loads(str(z["meta"])) if "meta" in z else {}
        params = DynamicsParams(**{n: z[n] for n in DynamicsParams.names()})
    return params, meta


def load_train_state(path, history):
    """Rebuild a resumable :class:`TrainRun` from a training checkpoint and its history."""
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        names = DynamicsParams.names()
        params = DynamicsParams(**{n: z[n] for n in names})
        m = DynamicsParams(**{n: z[f"adam_m_{n}"] for n in names})
        v = DynamicsParams(**{n: z[f"adam_v_{n}"] for n in names})
    adam = AdamState(m, v, **meta["adam"])
    step = meta["step"]
    kept = [h for h in history if h["step"] < step or (h["kind"] == "valid" and h["step"] == step)]
    run = TrainRun(params, adam, step=step, history=kept)
    return run, meta
