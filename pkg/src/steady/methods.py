"""One entry point per learning pipeline, all producing interchangeable models."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import (
    fit_supervised,
    fithand_estimate,
    fittruth_dataset,
    fittv_estimate,
)
from .data import HovDataset, make_hov_dataset
from .hovercraft import HandModel
from .neural import DynamicsParams, NeuralDynamics, load_params, save_params
from .trainer import train

log = logging.getLogger(__name__)

# config sections that influence a fitted model
FIT_SECTIONS = ("hov", "excitation", "data", "train", "supervised", "tv")

LEARNED = ("steady", "steady-minus", "fithand", "fittv", "fittruth")
METHODS = ("hand",) + LEARNED


@dataclass
class MethodResult:
    method: str
    params: DynamicsParams | None  # None for the analytic hand model
    info: dict = field(default_factory=dict)
    run: object = None
    history: list = field(default_factory=list)


def build_model(method, params, hov, u_max=1.0):
    """The dynamics model a method result stands for."""
    if method == "hand":
        return HandModel(hov)
    if params is None:
        raise ValueError(f"method {method!r} needs learned parameters")
    return NeuralDynamics(params, hov.dt, u_max)


def dataset_for(cfg, sigma_deg=None):
    d = cfg.data
    sigma = np.deg2rad(d.sigma_deg if sigma_deg is None else sigma_deg)
    return make_hov_dataset(d.seed, sigma, d.n_train, d.n_valid, d.n_test, d.duration,
                            cfg.hov, cfg.excitation, d.n_landmarks)


def train_config_for(method, cfg):
    if method == "steady":
        return cfg.train
    if method == "steady-minus":
        return replace(cfg.train, anneal_steps=0)
    raise ValueError(f"{method!r} is not an EM method")


def _supervised_config(cfg):
    # network init and input scaling are shared with EM training
    return replace(cfg.supervised, sigma0=cfg.train.sigma0, u_max=cfg.train.u_max)


def run_method(method, ds: HovDataset, cfg, on_check=None, run=None) -> MethodResult:
    """Fit ``method`` on the training split of ``ds`` under run config ``cfg``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "hand":
        return MethodResult(method, None, {"analytic": True})
    if method in ("steady", "steady-minus"):
        tcfg = train_config_for(method, cfg)
        best, run = train(ds.train, ds.valid, tcfg, run=run, on_check=on_check)
        scores = run.validations()
        info = {"steps": run.step, "best_valid": max(s for _, s in scores)}
        return MethodResult(method, best, info, run, run.history)
    if method == "fithand":
        data = fithand_estimate(HandModel(ds.hov), ds.train, cfg.train.n_particles, cfg.train.seed)
        info = {}
    elif method == "fittv":
        data, lam = fittv_estimate(ds.train, ds.lmap, ds.sigma, ds.hov.dt, cfg.tv, valid_items=ds.valid)
        info = {"lam": lam}
    else:
        data = fittruth_dataset(ds.train)
        info = {}
    info["transitions"] = len(data)
    return MethodResult(method, fit_supervised(data, _supervised_config(cfg)), info)


def with_sigma(cfg, sigma_deg):
    return replace(cfg, data=replace(cfg.data, sigma_deg=float(sigma_deg)))


def fit_key(method, cfg):
    return f"{method}-{cfg.hash(FIT_SECTIONS)}"


def fit_cached(method, cfg, cache_dir=None):
    """:func:`run_method` on the dataset described by ``cfg``, memoized on disk.

    Entries are keyed by the method and the hash of every config section
    that affects fitting, so a hit is exactly what a fresh fit would return.
    """
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / fit_key(method, cfg)
        meta_path = path.with_suffix(".json")
        if meta_path.exists():
            rec = json.loads(meta_path.read_text())
            params = load_params(path.with_suffix(".npz")) if rec["has_params"] else None
            return MethodResult(method, params, rec["info"], None, rec["history"])
    res = run_method(method, dataset_for(cfg), cfg)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        if res.params is not None:
            save_params(res.params, path.with_suffix(".npz"))
        rec = {"method": method, "has_params": res.params is not None, "info": res.info,
               "history": res.history}
        path.with_suffix(".json").write_text(json.dumps(rec))
    return res
