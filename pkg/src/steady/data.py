"""Observed datasets and their line-delimited JSON serialization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hovercraft import Excitation, HovParams, Trajectory, generate_dataset
from .observation import LandmarkMap, ObservationSequence, observe_trajectory

FORMAT_VERSION = 1


@dataclass
class ObservedTrajectory:
    """What a learner sees (observations and controls) plus optional ground truth."""

    obs: ObservationSequence
    controls: np.ndarray
    dt: float
    truth: Trajectory | None = None

    def __len__(self):
        return len(self.obs)

    def restrided(self, stride, rng):
        """Fresh observations of the ground truth at a different rate."""
        if self.truth is None:
            raise ValueError("re-observing requires ground truth")
        obs = observe_trajectory(self.truth, self.obs.lmap, self.obs.sigma, stride, rng)
        return ObservedTrajectory(obs, self.controls, self.dt, self.truth)


@dataclass
class HovDataset:
    train: list
    valid: list
    test: list
    lmap: LandmarkMap
    sigma: float
    hov: HovParams = field(default_factory=HovParams)
    seed: int = 0

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}


def make_hov_dataset(seed=0, sigma=np.deg2rad(5.0), n_train=4, n_valid=4, n_test=8,
                     duration=10.0, hov=HovParams(), excitation=Excitation(),
                     n_landmarks=4, stride=1):
    """Simulate trajectories, place landmarks and observe every step.

    Trajectories and landmarks depend only on ``seed``; the observation
    noise stream is separate so changing ``sigma`` keeps the same motion.
    """
    train, valid, test = generate_dataset(seed, n_train, n_valid, n_test, duration, hov, excitation)
    ss_map, ss_obs = np.random.SeedSequence([seed, 1]).spawn(2)
    lmap = LandmarkMap.random(np.random.default_rng(ss_map), n=n_landmarks)
    obs_rng = np.random.default_rng(ss_obs)

    def observed(trajs):
        return [ObservedTrajectory(observe_trajectory(t, lmap, sigma, stride, obs_rng), t.controls, t.dt, t)
                for t in trajs]

    return HovDataset(observed(train), observed(valid), observed(test), lmap, float(sigma), hov, seed)


def _traj_record(item: ObservedTrajectory, split, index):
    rec = {
        "split": split,
        "index": index,
        "dt": item.dt,
        "controls": item.controls.tolist(),
        "bearings": [None if b is None else b.tolist() for b in item.obs.steps()],
    }
    if item.truth is not None:
        rec["states"] = item.truth.states.tolist()
    return rec


def save_dataset(ds: HovDataset, path, include_truth=True, header_extra=None):
    """One header line, then one JSON record per trajectory."""
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "hov_dataset",
        "seed": ds.seed,
        "sigma": ds.sigma,
        "landmarks": ds.lmap.positions.tolist(),
        "hov_params": asdict(ds.hov),
        **(header_extra or {}),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for split, items in ds.splits().items():
        for i, item in enumerate(items):
            if not include_truth:
                item = ObservedTrajectory(item.obs, item.controls, item.dt, None)
            lines.append(json.dumps(_traj_record(item, split, i), sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format_version") != FORMAT_VERSION or header.get("kind") != "hov_dataset":
        raise ValueError(f"{path}: not a version-{FORMAT_VERSION} hov dataset")
    lmap = LandmarkMap(np.array(header["landmarks"]))
    sigma = float(header["sigma"])
    splits = {"train": [], "valid": [], "test": []}
    for line in lines[1:]:
        rec = json.loads(line)
        steps = rec["bearings"]
        present = np.array([b is not None for b in steps])
        b = np.array([[np.nan] * len(lmap) if s is None else s for s in steps], dtype=float)
        controls = np.array(rec["controls"], dtype=float).reshape(-1, 2)
        truth = Trajectory(rec["dt"], np.array(rec["states"]), controls) if "states" in rec else None
        splits[rec["split"]].append(
            ObservedTrajectory(ObservationSequence(b, present, sigma, lmap), controls, rec["dt"], truth))
    ds = HovDataset(splits["train"], splits["valid"], splits["test"], lmap, sigma,
                    HovParams(**header["hov_params"]), header["seed"])
    return ds, header
