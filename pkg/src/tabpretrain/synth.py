"""Synthetic data with controlled feature importance, and decodability probes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import diffcore as dc
from .data import Dataset, TaskType, prepare, random_splits
from .model import embed

logger = logging.getLogger(__name__)


@dataclass
class SyntheticSpec:
    n: int = 50_000
    m: int = 8
    c: float = 0.5
    n_trees: int = 10
    depth: int = 10
    seed: int = 0
    split: tuple[float, float, float] = (0.64, 0.16, 0.20)
    importance: np.ndarray | None = None  # override the Dirichlet draw

    def covariance(self) -> np.ndarray:
        return np.full((self.m, self.m), self.c) + (1.0 - self.c) * np.eye(self.m)


@dataclass
class ObliviousTree:
    """Same (feature, threshold) test on every node of a level; 2**depth leaf logits."""

    features: np.ndarray
    thresholds: np.ndarray
    leaves: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.features)

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        bits = (x[:, self.features] > self.thresholds).astype(np.int64)
        weights = 1 << np.arange(self.depth - 1, -1, -1)
        return bits @ weights

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.leaves[self.leaf_index(x)]


@dataclass
class SyntheticData:
    dataset: Dataset
    importance: np.ndarray
    trees: list[ObliviousTree] = field(repr=False)

    def logit(self, x: np.ndarray) -> np.ndarray:
        return np.mean([t(x) for t in self.trees], axis=0)


def batch_size_for(n_train: int) -> int:
    if n_train < 20_000:
        return 128
    if n_train < 100_000:
        return 256
    if n_train < 300_000:
        return 512
    return 1024


def sample_tree(x: np.ndarray, p: np.ndarray, depth: int, rng: np.random.Generator) -> ObliviousTree:
    features = rng.choice(len(p), size=depth, p=p)
    lo, hi = x.min(axis=0), x.max(axis=0)
    thresholds = rng.uniform(lo[features], hi[features])
    leaves = rng.normal(0.0, 1.0, size=2**depth)
    return ObliviousTree(features, thresholds, leaves)


def generate(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    p = (np.asarray(spec.importance, dtype=float) if spec.importance is not None
         else rng.dirichlet(np.ones(spec.m)))
    chol = np.linalg.cholesky(spec.covariance())
    x = rng.standard_normal((spec.n, spec.m)) @ chol.T
    trees = [sample_tree(x, p, spec.depth, rng) for _ in range(spec.n_trees)]
    logit = np.mean([t(x) for t in trees], axis=0)
    y = (logit > 0).astype(np.int64)
    sizes = [int(round(f * spec.n)) for f in spec.split[:2]]
    sizes.append(spec.n - sum(sizes))
    splits = random_splits(spec.n, tuple(sizes), spec.seed)
    ds = Dataset(
        name=f"synth_{spec.seed}",
        task=TaskType.BINCLASS,
        x_num=x,
        x_cat=np.zeros((spec.n, 0), dtype=np.int64),
        y=y,
        splits=splits,
        batch_size=batch_size_for(sizes[0]),
        n_classes=2,
        num_names=[f"x{j}" for j in range(spec.m)],
        class_names=["0", "1"],
    )
    return SyntheticData(ds, p, trees)


def importance_rank(p) -> np.ndarray:
    """Rank 0 = most important feature; ties broken by feature index."""
    p = np.asarray(p, dtype=float)
    order = np.lexsort((np.arange(len(p)), -p))
    ranks = np.empty(len(p), dtype=np.int64)
    ranks[order] = np.arange(len(p))
    return ranks


# -------------------------------------------------------------------- probes


@dataclass
class ProbeConfig:
    hidden: int = 512
    layers: int = 2
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 256


def probe_embeddings(z: np.ndarray, targets: np.ndarray, splits: dict, config: ProbeConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Train one MLP regressor per target column on fixed embeddings; return test RMSEs.

    The per-column MLPs are independent; they are stacked along a leading axis
    and trained on the same batch order.  Each keeps its best-validation epoch.
    """
    z = np.asarray(z, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(z), -1)
    train, val, test = splits["train"], splits["val"], splits["test"]
    # one global scale: per-unit scaling blows up units that are dead on train but not on test
    z = z - z[train].mean(axis=0)
    scale = np.sqrt(np.mean(z[train] ** 2))
    z = z / (scale if scale > 1e-12 else 1.0)
    f = targets.shape[1]
    params: dict[str, np.ndarray] = {}
    d_in = z.shape[1]
    widths = [d_in] + [config.hidden] * config.layers + [1]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / a)
        params[f"w{i}"] = rng.uniform(-bound, bound, size=(f, a, b))
        params[f"b{i}"] = np.zeros((f, 1, b))
    n_layers = len(widths) - 1

    def forward(x, tensors=None):
        h = dc.Tensor(x)
        for i in range(n_layers):
            w = tensors[f"w{i}"] if tensors else dc.Tensor(params[f"w{i}"])
            b = tensors[f"b{i}"] if tensors else dc.Tensor(params[f"b{i}"])
            h = dc.add(dc.matmul(h, w), b)
            if i < n_layers - 1:
                h = dc.relu(h)
        return h  # (f, batch, 1)

    def split_rmse(rows):
        pred = forward(z[rows]).data[:, :, 0]
        return np.sqrt(np.mean((pred - targets[rows].T) ** 2, axis=1))

    opt = dc.AdamW(params, lr=config.lr)
    best_val = np.full(f, np.inf)
    best = {k: v.copy() for k, v in params.items()}
    for _ in range(config.epochs):
        order = train[rng.permutation(len(train))]
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            tensors = {k: dc.parameter(v, k) for k, v in params.items()}
            out = forward(z[batch], tensors)
            diff = dc.sub(out, targets[batch].T[:, :, None])
            # sum of per-column MSEs keeps each probe's gradient independent of f
            loss = dc.mul(dc.mean(dc.mul(diff, diff)), float(f))
            opt.step(dc.backward(loss, tensors))
        val_rmse = split_rmse(val)
        better = val_rmse < best_val
        best_val = np.where(better, val_rmse, best_val)
        for k, v in params.items():
            best[k][better] = v[better]
    for k in params:
        params[k][...] = best[k]
    return split_rmse(test)


def decodability_probe(state, prep, feature: int | list[int], config: ProbeConfig | None = None,
                       rng: np.random.Generator | None = None) -> np.ndarray | float:
    """Test RMSE of probes predicting raw feature(s) from a frozen backbone's embeddings."""
    config = config or ProbeConfig()
    rng = rng or np.random.default_rng(0)
    single = np.isscalar(feature)
    features = [feature] if single else list(feature)
    z = embed(state, prep.x_num, prep.x_cat)
    rmse = probe_embeddings(z, prep.dataset.x_num[:, features], prep.splits, config, rng)
    return float(rmse[0]) if single else rmse


# ----------------------------------------------------------- aggregate study


INIT_KINDS = ("scratch", "mask", "mask_target")


@dataclass
class StudyRow:
    dataset_seed: int
    feature: int
    importance_rank: int
    importance: float
    rmse: float
    init_kind: str


def decodability_study(spec: SyntheticSpec, seeds, pipeline_for, probe: ProbeConfig | None = None,
                       init_kinds=INIT_KINDS) -> list[StudyRow]:
    """Probe every feature of finetuned models from each init kind on each synthetic dataset.

    `pipeline_for(init_kind)` returns the PipelineConfig to run; the finetuned state is probed.
    """
    from .trainer import run_pipeline

    rows: list[StudyRow] = []
    for seed in seeds:
        data = generate(SyntheticSpec(**{**spec.__dict__, "seed": seed}))
        prep = prepare(data.dataset, seed=seed)
        ranks = importance_rank(data.importance)
        for kind in init_kinds:
            result = run_pipeline(prep, pipeline_for(kind), seed, keep_states=True)
            rmse = decodability_probe(result.state, prep, list(range(spec.m)), probe,
                                      np.random.default_rng(seed))
            logger.info("synth seed %d %s test metric %.4f probe rmse %s", seed, kind,
                        result.test_metric, np.round(rmse, 3))
            rows.extend(StudyRow(seed, j, int(ranks[j]), float(data.importance[j]), float(rmse[j]), kind)
                        for j in range(spec.m))
    return rows


def paired_sign_test(a, b) -> tuple[int, int, float]:
    """One-sided sign test of a > b over pairs; ties dropped.  Returns (wins, n, p)."""
    d = np.asarray(a) - np.asarray(b)
    d = d[d != 0]
    wins = int((d > 0).sum())
    n = len(d)
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return wins, n, float(p)


def group_means(rows: list[StudyRow], kind: str, half: str, m: int) -> dict[int, float]:
    """Per-dataset mean probe RMSE over the top or bottom half of importance ranks."""
    cut = m // 2
    keep = (lambda r: r < cut) if half == "top" else (lambda r: r >= cut)
    out: dict[int, list[float]] = {}
    for r in rows:
        if r.init_kind == kind and keep(r.importance_rank):
            out.setdefault(r.dataset_seed, []).append(r.rmse)
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}
