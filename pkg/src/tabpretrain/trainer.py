"""Two-stage training: pretrain on corrupted inputs, then finetune on clean data."""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .data import Prepared, batches
from .metrics import MetricKind, metric_for, score, to_predictions
from .model import DataMeta, ModelSpec, ModelState, build, head_forward, backbone_forward, predict, reset_head
from .objective import CorruptionSource, Objective, compose, loss_supervised, model_heads

logger = logging.getLogger(__name__)

PRETRAIN_STOPS = ("by_pretrain_val_loss", "by_finetune_metric")


class DivergenceError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    # used only when share_lr_wd is False
    finetune_lr: float | None = None
    finetune_weight_decay: float | None = None
    share_lr_wd: bool = True
    corrupt_p: float = 0.5
    max_pretrain_iters: int = 100_000
    eval_every: int = 10_000
    pretrain_stop: str = "by_finetune_metric"
    pretrain_patience: int = 2
    max_finetune_epochs: int = 200
    patience: int = 16
    probe_finetune_epochs: int = 50
    no_finetune: bool = False
    eval_seed: int = 0
    batch_size: int | None = None

    def validate(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.eval_every <= 0 or self.max_pretrain_iters % self.eval_every:
            raise ConfigError("eval_every must be positive and divide max_pretrain_iters")
        if self.pretrain_stop not in PRETRAIN_STOPS:
            raise ConfigError(f"pretrain_stop must be one of {PRETRAIN_STOPS}")
        if self.patience < 1 or self.pretrain_patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 <= self.corrupt_p <= 1.0:
            raise ConfigError("corrupt_p must be in [0, 1]")
        if not self.share_lr_wd and self.finetune_lr is None:
            raise ConfigError("share_lr_wd=false needs finetune_lr")

    def finetune_hparams(self) -> tuple[float, float]:
        if self.share_lr_wd:
            return self.lr, self.weight_decay
        wd = self.finetune_weight_decay if self.finetune_weight_decay is not None else self.weight_decay
        return self.finetune_lr, wd


@dataclass
class PipelineConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    objective: Objective | None = None  # None = train from scratch
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.train.validate()
        if self.objective is not None:
            self.model = replace(self.model, **model_heads(self.objective))
            if self.train.no_finetune and not self.objective.uses_supervised:
                raise ConfigError("no_finetune needs an objective with a supervised head")
        elif self.train.no_finetune:
            raise ConfigError("no_finetune needs a pretraining objective")
        self.model.validate()

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(),
                "objective": asdict(self.objective) if self.objective else None,
                "train": asdict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        obj = d.get("objective")
        try:
            cfg = cls(model=ModelSpec.from_dict(d.get("model", {})),
                      objective=Objective(**obj) if obj else None,
                      train=TrainConfig(**d.get("train", {})))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def objective_name(self) -> str:
        if self.objective is None:
            return "scratch"
        return self.objective.kind + ("_nofinetune" if self.train.no_finetune else "")


# ------------------------------------------------------------------ helpers


def _trainable(state: ModelState, prefixes_excluded: tuple[str, ...]) -> dict[str, dc.Tensor]:
    return {k: dc.parameter(v, k) for k, v in state.params.items()
            if not k.startswith(prefixes_excluded)}


def _stream(rng: np.random.Generator, rows: np.ndarray, batch_size: int):
    while True:
        yield from batches(rows, batch_size, rng)


def evaluate(state: ModelState, prep: Prepared, split: str, metric: MetricKind):
    rows = prep.splits[split]
    pred = to_predictions(predict(state, prep.x_num[rows], prep.x_cat[rows]), prep.task, prep.codec)
    return score(metric, pred, prep.y[rows]), pred


@dataclass
class FinetuneResult:
    state: ModelState
    val_metric: float
    test_metric: float
    val_pred: np.ndarray
    test_pred: np.ndarray
    epochs: int
    best_epoch: int


def finetune(state: ModelState, prep: Prepared, config: TrainConfig, rng: np.random.Generator,
             metric: MetricKind | None = None, max_epochs: int | None = None,
             fresh_head: bool = True) -> FinetuneResult:
    """Train backbone + downstream head on clean data, early-stopping on validation.

    `state` is not modified; the best-validation snapshot is returned.
    """
    metric = metric or metric_for(prep.task, prep.dataset.name)
    state = state.clone()
    if fresh_head:
        reset_head(state, rng, "g")
    lr, wd = config.finetune_hparams()
    names = [k for k in state.params if not k.startswith("h.")]
    opt = dc.AdamW({k: state.params[k] for k in names}, lr=lr, weight_decay=wd)
    train = prep.splits["train"]
    bs = config.batch_size or prep.batch_size
    cap = config.max_finetune_epochs if max_epochs is None else max_epochs

    best_val, best_params, best_epoch, stale = metric.worst, None, 0, 0
    epoch = 0
    for epoch in range(1, cap + 1):
        for rows in batches(train, bs, rng):
            tensors = {k: dc.parameter(state.params[k], k) for k in names}
            z = backbone_forward(state, prep.x_num[rows], prep.x_cat[rows], True, rng, tensors)
            out = head_forward(state, z, "g", tensors=tensors)
            loss = loss_supervised(out, prep.y_model[rows], prep.task)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"finetune loss is {loss.data} at epoch {epoch}")
            opt.step(dc.backward(loss, tensors))
        val, _ = evaluate(state, prep, "val", metric)
        if best_params is None or metric.better(val, best_val):
            best_val, best_epoch, stale = val, epoch, 0
            best_params = {k: v.copy() for k, v in state.params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_params is not None:
        state.load_params(best_params)
    val, val_pred = evaluate(state, prep, "val", metric)
    test, test_pred = evaluate(state, prep, "test", metric)
    return FinetuneResult(state, val, test, val_pred, test_pred, epoch, best_epoch)


@dataclass
class PretrainResult:
    state: ModelState
    curve: list[tuple[int, float]]
    best_iter: int
    iters: int


def pretrain_val_loss(state: ModelState, prep: Prepared, objective: Objective,
                      source: CorruptionSource, config: TrainConfig) -> float:
    """Objective on validation rows, corrupted with a fixed seed, eval mode."""
    rng = np.random.default_rng(config.eval_seed)
    total, count = 0.0, 0
    for rows in batches(prep.splits["val"], config.batch_size or prep.batch_size):
        if len(rows) < 2:
            continue
        loss, _ = compose(objective, prep, rows, state, source, config.corrupt_p, rng,
                          tensors=None, train_mode=False)
        total += float(loss.data) * len(rows)
        count += len(rows)
    return total / max(count, 1)


def pretrain(state: ModelState, prep: Prepared, objective: Objective, config: TrainConfig,
             rng: np.random.Generator, metric: MetricKind | None = None) -> PretrainResult:
    """Optimise the pretraining objective, keeping the best snapshot per `config.pretrain_stop`."""
    objective.check_model(state)
    metric = metric or metric_for(prep.task, prep.dataset.name)
    state = state.clone()
    if config.max_pretrain_iters == 0:
        return PretrainResult(state, [], 0, 0)
    source = CorruptionSource.from_prepared(prep, objective.target_conditioned)
    excluded = () if objective.uses_supervised else ("g.",)
    names = [k for k in state.params if not k.startswith(excluded)] if excluded else list(state.params)
    opt = dc.AdamW({k: state.params[k] for k in names}, lr=config.lr, weight_decay=config.weight_decay)
    bs = config.batch_size or prep.batch_size
    stream = _stream(rng, prep.splits["train"], bs)
    by_loss = config.pretrain_stop == "by_pretrain_val_loss"
    probe_rng_seed = int(rng.integers(2**63))

    curve: list[tuple[int, float]] = []
    best_crit, best_params, best_iter, stale = None, None, 0, 0
    it = 0
    while it < config.max_pretrain_iters:
        rows = next(stream)
        if len(rows) < 2:
            continue
        it += 1
        tensors = {k: dc.parameter(state.params[k], k) for k in names}
        loss, _ = compose(objective, prep, rows, state, source, config.corrupt_p, rng, tensors)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"pretraining loss is {loss.data} at iteration {it} "
                                  f"(objective {objective.kind}, lr {config.lr})")
        opt.step(dc.backward(loss, tensors))
        if it % config.eval_every:
            continue
        if by_loss:
            crit = pretrain_val_loss(state, prep, objective, source, config)
            improved = best_crit is None or crit < best_crit
        else:
            probe = finetune(state, prep, config, np.random.default_rng(probe_rng_seed), metric,
                             max_epochs=config.probe_finetune_epochs)
            crit = probe.val_metric
            improved = best_crit is None or metric.better(crit, best_crit)
        curve.append((it, float(crit)))
        logger.info("pretrain %s iter %d criterion %.6g", objective.kind, it, crit)
        if improved:
            best_crit, best_iter, stale = crit, it, 0
            best_params = {k: v.copy() for k, v in state.params.items()}
        else:
            stale += 1
            if stale >= config.pretrain_patience:
                break
    if best_params is not None:
        state.load_params(best_params)
    return PretrainResult(state, curve, best_iter, it)


# ----------------------------------------------------------------- pipelines


@dataclass
class SeedResult:
    seed: int
    val_metric: float
    test_metric: float
    test_pred: np.ndarray
    val_pred: np.ndarray
    seconds: float
    pretrain_curve: list = field(default_factory=list)
    state: ModelState | None = None
    pretrained: ModelState | None = None


def _seeds(seed: int):
    init, pre, fine = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(pre), np.random.default_rng(fine))


def build_for(prep: Prepared, cfg: PipelineConfig, rng: np.random.Generator) -> ModelState:
    return build(cfg.model, DataMeta.of(prep), rng, prep)


def run_pipeline(prep: Prepared, cfg: PipelineConfig, seed: int,
                 pretrained: ModelState | None = None, keep_states: bool = False) -> SeedResult:
    """One seed of pretrain (optional) + finetune + evaluate.

    With `pretrained` given, pretraining is skipped and finetuning starts from it
    (the shared-checkpoint ensembling mode).
    """
    cfg.validate()
    start = time.perf_counter()
    metric = metric_for(prep.task, prep.dataset.name)
    init_rng, pre_rng, fine_rng = _seeds(seed)
    curve: list = []
    if pretrained is not None:
        state = pretrained
    else:
        state = build_for(prep, cfg, init_rng)
        if cfg.objective is not None:
            res = pretrain(state, prep, cfg.objective, cfg.train, pre_rng, metric)
            state, curve = res.state, res.curve
    if cfg.train.no_finetune:
        val, val_pred = evaluate(state, prep, "val", metric)
        test, test_pred = evaluate(state, prep, "test", metric)
        final = state
    else:
        ft = finetune(state, prep, cfg.train, fine_rng, metric)
        val, test, val_pred, test_pred, final = ft.val_metric, ft.test_metric, ft.val_pred, ft.test_pred, ft.state
    return SeedResult(seed, val, test, test_pred, val_pred, time.perf_counter() - start, curve,
                      final if keep_states else None, state if keep_states else None)


@dataclass
class RunRecord:
    config_hash: str
    metric: str
    seeds: list[int] = field(default_factory=list)
    val_metrics: list[float] = field(default_factory=list)
    test_metrics: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    pretrain_curves: list[list] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)
    test_predictions: list[np.ndarray] = field(default_factory=list, repr=False)
    notes: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_metrics))

    @property
    def std(self) -> float:
        return float(np.std(self.test_metrics))

    def add(self, r: SeedResult) -> None:
        self.seeds.append(r.seed)
        self.val_metrics.append(float(r.val_metric))
        self.test_metrics.append(float(r.test_metric))
        self.seconds.append(float(r.seconds))
        self.pretrain_curves.append([list(p) for p in r.pretrain_curve])
        self.test_predictions.append(np.asarray(r.test_pred))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("test_predictions")
        d["failures"] = {str(k): v for k, v in self.failures.items()}
        d.update(mean=self.mean if self.test_metrics else None,
                 std=self.std if self.test_metrics else None, partial=self.partial)
        return d


def _run_one(args):
    prep, cfg, seed = args
    try:
        return seed, run_pipeline(prep, cfg, seed), None
    except Exception:  # noqa: BLE001 - recorded per seed
        return seed, None, traceback.format_exc(limit=3)


def run_seeds(prep: Prepared, cfg: PipelineConfig, seeds=range(15), jobs: int = 1,
              on_result=None) -> RunRecord:
    """Independent pipelines per seed; failures are recorded and mark the record partial."""
    cfg.validate()
    record = RunRecord(cfg.config_hash(), metric_for(prep.task, prep.dataset.name).value)
    work = [(prep, cfg, s) for s in seeds]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(_run_one, work))
    else:
        outcomes = map(_run_one, work)
    for seed, result, err in outcomes:
        if result is None:
            logger.error("seed %d failed: %s", seed, err)
            record.failures[seed] = err
            continue
        record.add(result)
        if on_result is not None:
            on_result(result)
    return record


def run_efficient(prep: Prepared, cfg: PipelineConfig, pretrain_seed: int = 0,
                  seeds=range(15)) -> RunRecord:
    """Pretrain once, then finetune from the shared checkpoint with every seed."""
    cfg.validate()
    if cfg.objective is None:
        raise ConfigError("efficient ensembling needs a pretraining objective")
    init_rng, pre_rng, _ = _seeds(pretrain_seed)
    metric = metric_for(prep.task, prep.dataset.name)
    shared = pretrain(build_for(prep, cfg, init_rng), prep, cfg.objective, cfg.train, pre_rng,
                      metric).state
    record = RunRecord(cfg.config_hash(), metric.value, notes=["efficient: shared pretrain checkpoint"])
    for s in seeds:
        record.add(run_pipeline(prep, cfg, s, pretrained=shared))
    return record


def ensemble(predictions, y: np.ndarray, metric: MetricKind | str, mode: str = "standard",
             group_size: int = 5) -> dict:
    """Average 15 prediction vectors in three disjoint groups of five and score each group."""
    metric = MetricKind(metric)
    if mode not in ("standard", "efficient"):
        raise ValueError(f"unknown ensemble mode {mode!r}")
    if len(predictions) != 3 * group_size:
        raise ValueError(f"ensembling needs exactly {3 * group_size} prediction vectors, "
                         f"got {len(predictions)}")
    preds = np.asarray(predictions, dtype=np.float64)
    scores = [score(metric, preds[g * group_size:(g + 1) * group_size].mean(axis=0), y)
              for g in range(3)]
    return {"mode": mode, "metric": metric.value, "ensembles": scores, "mean": float(np.mean(scores))}
