"""Random search over the MLP / PLR / T-LR hyperparameter spaces."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .trainer import PipelineConfig

logger = logging.getLogger(__name__)

ATOM_PROBABILITY = 0.5


@dataclass
class SearchSpace:
    embedding: str = "none"  # none | plr | tlr
    layers: tuple[int, int] = (1, 8)
    dropout: tuple[float, float] = (0.0, 0.5)
    lr: tuple[float, float] = (5e-5, 5e-3)
    weight_decay: tuple[float, float] = (1e-6, 1e-3)
    corrupt_p: tuple[float, float] = (0.2, 0.8)
    d_emb: tuple[int, int] = (1, 128)
    plr_k: tuple[int, int] = (1, 128)
    plr_sigma: tuple[float, float] = (0.01, 100.0)
    tlr_leaves: tuple[int, int] = (2, 256)
    tlr_min_leaf: tuple[int, int] = (1, 128)
    tlr_min_gain: tuple[float, float] = (1e-9, 0.01)


def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _int(rng, bounds):
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _maybe_zero(rng, draw):
    return 0.0 if rng.random() < ATOM_PROBABILITY else draw()


def needs_corruption(objective_kind: str | None) -> bool:
    """p = 0 makes every objective but plain `sup` degenerate, so the zero atom is dropped."""
    return objective_kind is not None and objective_kind != "sup"


def sample(space: SearchSpace, rng: np.random.Generator, objective_kind: str | None = None) -> dict:
    """Draw one configuration as nested overrides {"model": ..., "train": ...}."""
    model: dict = {
        "layers": _int(rng, space.layers),
        "dropout": _maybe_zero(rng, lambda: float(rng.uniform(*space.dropout))),
    }
    train: dict = {
        "lr": _log_uniform(rng, *space.lr),
        "weight_decay": _maybe_zero(rng, lambda: _log_uniform(rng, *space.weight_decay)),
    }
    if objective_kind is not None:
        draw_p = lambda: float(rng.uniform(*space.corrupt_p))  # noqa: E731
        train["corrupt_p"] = draw_p() if needs_corruption(objective_kind) else _maybe_zero(rng, draw_p)
    if space.embedding == "plr":
        model["embedding"] = {"kind": "plr", "d_emb": _int(rng, space.d_emb),
                              "k": _int(rng, space.plr_k),
                              "sigma": _log_uniform(rng, *space.plr_sigma)}
    elif space.embedding == "tlr":
        model["embedding"] = {"kind": "tlr", "d_emb": _int(rng, space.d_emb),
                              "max_leaves": _int(rng, space.tlr_leaves),
                              "min_leaf": _int(rng, space.tlr_min_leaf),
                              "min_gain": _log_uniform(rng, *space.tlr_min_gain)}
    return {"model": model, "train": train}


def apply_overrides(base: PipelineConfig, overrides: dict) -> PipelineConfig:
    d = copy.deepcopy(base.to_dict())
    for section, values in overrides.items():
        for k, v in values.items():
            if k == "embedding":
                d[section]["embedding"] = {**d[section].get("embedding", {}), **v}
            else:
                d[section][k] = v
    return PipelineConfig.from_dict(d)


@dataclass
class Trial:
    trial_id: int
    params: dict
    value: float | None
    seconds: float
    error: str | None = None


@dataclass
class SearchResult:
    best_params: dict
    best_value: float
    trials: list[Trial] = field(default_factory=list)
    higher_is_better: bool = True
    note: str = "random search (substitutes adaptive TPE search)"

    @property
    def best_trial(self) -> Trial:
        return next(t for t in self.trials if t.params is self.best_params)

    def write_log(self, path) -> None:
        flat_keys = sorted({k for t in self.trials for k in _flatten(t.params)})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial_id", *flat_keys, "val_metric", "wall_seconds"])
            for t in self.trials:
                flat = _flatten(t.params)
                w.writerow([t.trial_id, *[flat.get(k, "") for k in flat_keys],
                            "" if t.value is None else f"{t.value:.6g}", f"{t.seconds:.3f}"])


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def search(space: SearchSpace, pipeline: Callable[[dict, int], float], n_trials: int, seed: int,
           higher_is_better: bool = True, objective_kind: str | None = None,
           sampler: Callable | None = None) -> SearchResult:
    """Evaluate `pipeline(params, trial_seed)` on `n_trials` random configurations.

    `pipeline` returns the validation metric.  Each trial gets its own rng stream
    derived from `seed`, so trials are independent of evaluation order.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    sampler = sampler or (lambda rng: sample(space, rng, objective_kind))
    streams = np.random.SeedSequence(seed).spawn(n_trials)
    trials: list[Trial] = []
    best: Trial | None = None
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        params = sampler(rng)
        trial_seed = int(rng.integers(2**31))
        start = time.perf_counter()
        try:
            value, error = float(pipeline(params, trial_seed)), None
            if not math.isfinite(value):
                value, error = None, "non-finite metric"
        except Exception as exc:  # noqa: BLE001 - a failed trial is logged, not fatal
            value, error = None, f"{type(exc).__name__}: {exc}"
            logger.warning("trial %d failed: %s", i, error)
        trial = Trial(i, params, value, time.perf_counter() - start, error)
        trials.append(trial)
        if value is not None and (best is None or
                                  (value > best.value if higher_is_better else value < best.value)):
            best = trial
    if best is None:
        raise RuntimeError(f"all {n_trials} trials failed")
    return SearchResult(best.params, best.value, trials, higher_is_better)
