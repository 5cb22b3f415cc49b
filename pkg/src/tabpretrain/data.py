"""Dataset directories, train-only preprocessing and batching."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
BATCH_SIZES = (128, 256, 512, 1024)
CDF_EPS = 1e-7


class DataError(ValueError):
    pass


class TaskType(str, enum.Enum):
    BINCLASS = "binclass"
    MULTICLASS = "multiclass"
    REGRESSION = "regression"

    @property
    def is_classification(self) -> bool:
        return self is not TaskType.REGRESSION


@dataclass(frozen=True, eq=False)
class Dataset:
    """Raw typed column store.

    `x_cat` holds dense codes fitted on the training split; code
    `cat_cardinalities[j]` is the reserved "unknown" code for column j.
    Classification targets are class indices `0..n_classes-1`.
    """

    name: str
    task: TaskType
    x_num: np.ndarray
    x_cat: np.ndarray
    y: np.ndarray
    splits: dict[str, np.ndarray]
    batch_size: int = 128
    n_classes: int | None = None
    preprocess: str = "quantile"
    num_names: list[str] = field(default_factory=list)
    cat_names: list[str] = field(default_factory=list)
    cat_vocab: list[list[str]] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        _validate(self)

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def n_num(self) -> int:
        return self.x_num.shape[1]

    @property
    def n_cat(self) -> int:
        return self.x_cat.shape[1]

    @property
    def cat_cardinalities(self) -> list[int]:
        return [len(v) for v in self.cat_vocab]

    def split_size(self, split: str) -> int:
        return len(self.splits[split])


def _validate(ds: Dataset) -> None:
    n = len(ds.y)
    if ds.x_num.shape[0] != n or ds.x_cat.shape[0] != n:
        raise DataError(f"{ds.name}: row count mismatch between features and target")
    if ds.x_num.shape[1] + ds.x_cat.shape[1] == 0:
        raise DataError(f"{ds.name}: no features")
    if np.isnan(ds.x_num).any():
        raise DataError(f"{ds.name}: NaN in numeric features")
    if np.isnan(np.asarray(ds.y, dtype=float)).any():
        raise DataError(f"{ds.name}: NaN targets")
    if ds.batch_size not in BATCH_SIZES:
        raise DataError(f"{ds.name}: batch_size must be one of {BATCH_SIZES}, got {ds.batch_size}")
    if ds.preprocess not in ("quantile", "none"):
        raise DataError(f"{ds.name}: preprocess must be 'quantile' or 'none'")
    seen = np.zeros(n, dtype=bool)
    for split in SPLITS:
        idx = ds.splits.get(split)
        if idx is None or len(idx) == 0:
            raise DataError(f"{ds.name}: empty split '{split}'")
        if idx.min() < 0 or idx.max() >= n:
            raise DataError(f"{ds.name}: split '{split}' indexes outside [0, {n})")
        if seen[idx].any() or len(np.unique(idx)) != len(idx):
            raise DataError(f"{ds.name}: split '{split}' overlaps another split")
        seen[idx] = True
    for j, vocab in enumerate(ds.cat_vocab):
        if ds.x_cat[:, j].max(initial=0) > len(vocab):
            raise DataError(f"{ds.name}: categorical column {j} code out of range")
    if ds.task.is_classification:
        k = ds.n_classes
        if k is None or (ds.task is TaskType.BINCLASS and k != 2) or (
            ds.task is TaskType.MULTICLASS and k < 3
        ):
            raise DataError(f"{ds.name}: invalid class count {k} for task {ds.task.value}")
        if ds.y.min() < 0 or ds.y.max() >= k:
            raise DataError(f"{ds.name}: class labels outside [0, {k})")


# ------------------------------------------------------------------ file I/O


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], rows[1:]


def _read_index(path: Path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        values = [line.strip() for line in fh if line.strip()]
    if values and not values[0].lstrip("-").isdigit():
        values = values[1:]
    return np.array([int(v) for v in values], dtype=np.int64)


def load(dir_path) -> Dataset:
    """Load a dataset directory (schema.json, X_num.csv, optional X_cat.csv, y.csv)."""
    root = Path(dir_path)
    schema_path = root / "schema.json"
    if not schema_path.exists():
        raise DataError(f"{root}: missing schema.json")
    schema = json.loads(schema_path.read_text())
    try:
        task = TaskType(schema["task"])
    except (KeyError, ValueError):
        raise DataError(f"{root}: unknown task {schema.get('task')!r}") from None

    if not (root / "y.csv").exists():
        raise DataError(f"{root}: missing y.csv")
    _, y_rows = _read_csv(root / "y.csv")
    y_raw = [r[0] for r in y_rows]
    n = len(y_raw)

    if (root / "X_num.csv").exists():
        num_names, num_rows = _read_csv(root / "X_num.csv")
        x_num = np.array(num_rows, dtype=np.float64).reshape(len(num_rows), len(num_names))
    else:
        num_names, x_num = [], np.zeros((n, 0))
    if (root / "X_cat.csv").exists():
        cat_names, cat_rows = _read_csv(root / "X_cat.csv")
        cat_str = np.array(cat_rows, dtype=object).reshape(len(cat_rows), len(cat_names))
    else:
        cat_names, cat_str = [], np.zeros((n, 0), dtype=object)
    if x_num.shape[0] != n or cat_str.shape[0] != n:
        raise DataError(f"{root}: feature files and y.csv have different row counts")

    splits = _load_splits(root, schema, n)

    train = splits["train"]
    vocab = [sorted(set(cat_str[train, j])) for j in range(cat_str.shape[1])]
    x_cat = np.zeros(cat_str.shape, dtype=np.int64)
    for j, words in enumerate(vocab):
        lookup = {w: i for i, w in enumerate(words)}
        unknown = len(words)
        x_cat[:, j] = [lookup.get(v, unknown) for v in cat_str[:, j]]

    class_names: list[str] = []
    n_classes = None
    if task.is_classification:
        class_names = sorted(set(y_raw), key=_natural_key)
        lookup = {c: i for i, c in enumerate(class_names)}
        y = np.array([lookup[v] for v in y_raw], dtype=np.int64)
        n_classes = schema.get("n_classes", len(class_names))
    else:
        try:
            y = np.array(y_raw, dtype=np.float64)
        except ValueError:
            raise DataError(f"{root}: non-numeric regression target") from None

    return Dataset(
        name=schema.get("name", root.name),
        task=task,
        x_num=x_num,
        x_cat=x_cat,
        y=y,
        splits=splits,
        batch_size=int(schema.get("batch_size", 128)),
        n_classes=n_classes,
        preprocess=schema.get("preprocess", "quantile"),
        num_names=list(num_names),
        cat_names=list(cat_names),
        cat_vocab=vocab,
        class_names=class_names,
    )


def _natural_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def _load_splits(root: Path, schema: dict, n: int) -> dict[str, np.ndarray]:
    files = {s: root / f"idx_{s}.csv" for s in SPLITS}
    if all(p.exists() for p in files.values()):
        return {s: _read_index(p) for s, p in files.items()}
    sizes = schema.get("split")
    if not sizes:
        raise DataError(f"{root}: schema needs 'split' sizes or idx_train/val/test.csv files")
    out, start = {}, 0
    for s in SPLITS:
        size = int(sizes.get(s, 0))
        if size <= 0:
            raise DataError(f"{root}: empty split '{s}'")
        out[s] = np.arange(start, start + size, dtype=np.int64)
        start += size
    if start > n:
        raise DataError(f"{root}: split sizes sum to {start} but only {n} rows")
    return out


def save(ds: Dataset, dir_path) -> Path:
    """Write `ds` in the directory format read by `load` (explicit index files)."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    names = ds.num_names or [f"num_{j}" for j in range(ds.n_num)]
    if ds.n_num:
        with open(root / "X_num.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            w.writerows([[repr(float(v)) for v in row] for row in ds.x_num])
    if ds.n_cat:
        cat_names = ds.cat_names or [f"cat_{j}" for j in range(ds.n_cat)]
        with open(root / "X_cat.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cat_names)
            for row in ds.x_cat:
                w.writerow([_code_to_word(ds.cat_vocab[j], c) for j, c in enumerate(row)])
    with open(root / "y.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y"])
        if ds.task.is_classification:
            labels = ds.class_names or [str(k) for k in range(ds.n_classes)]
            w.writerows([[labels[int(v)]] for v in ds.y])
        else:
            w.writerows([[repr(float(v))] for v in ds.y])
    for s in SPLITS:
        np.savetxt(root / f"idx_{s}.csv", ds.splits[s], fmt="%d")
    schema = {
        "name": ds.name,
        "task": ds.task.value,
        "batch_size": ds.batch_size,
        "preprocess": ds.preprocess,
        "split": {s: int(ds.split_size(s)) for s in SPLITS},
    }
    if ds.n_classes is not None:
        schema["n_classes"] = ds.n_classes
    (root / "schema.json").write_text(json.dumps(schema, indent=2))
    return root


def _code_to_word(vocab: list[str], code: int) -> str:
    return vocab[code] if code < len(vocab) else "__unknown__"


# ----------------------------------------------------------- quantile transform


@dataclass
class QuantileTransform:
    """Per-column empirical CDF followed by the inverse standard-normal CDF."""

    knots: np.ndarray  # (n_quantiles, m), non-decreasing per column
    references: np.ndarray  # (n_quantiles,) in [0, 1]
    constant: np.ndarray  # (m,) bool

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        for j in range(x.shape[1]):
            if self.constant[j]:
                out[:, j] = 0.0
                continue
            k = self.knots[:, j]
            # averaging both interpolation directions spreads repeated knots evenly
            cdf = 0.5 * (
                np.interp(x[:, j], k, self.references)
                - np.interp(-x[:, j], -k[::-1], -self.references[::-1])
            )
            out[:, j] = ndtri(np.clip(cdf, CDF_EPS, 1.0 - CDF_EPS))
        return out


def fit_quantile_transform(x_train: np.ndarray, n_quantiles: int = 1000, seed: int = 0,
                           jitter: bool = True) -> QuantileTransform:
    x_train = np.asarray(x_train, dtype=np.float64)
    n, m = x_train.shape
    if n < 2:
        raise DataError("quantile transform needs at least 2 rows")
    n_q = min(n_quantiles, n)
    references = np.linspace(0.0, 1.0, n_q)
    knots = np.zeros((n_q, m))
    constant = np.zeros(m, dtype=bool)
    rng = np.random.default_rng(seed)
    for j in range(m):
        col = x_train[:, j]
        std = col.std()
        if std == 0.0:
            logger.warning("column %d is constant on the train split; mapped to zeros", j)
            constant[j] = True
            knots[:, j] = col[0]
            continue
        if jitter and 1.0 - len(np.unique(col)) / n > 0.25:
            col = col + rng.normal(0.0, 1e-3 * std, size=n)
        knots[:, j] = np.maximum.accumulate(np.quantile(col, references))
    return QuantileTransform(knots=knots, references=references, constant=constant)


# -------------------------------------------------------------- target coding


def fd_bins(y: np.ndarray) -> np.ndarray:
    """Uniform bin edges over [min, max] with the Freedman-Diaconis bin count."""
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n < 4:
        raise DataError("fd_bins needs at least 4 values")
    lo, hi = float(y.min()), float(y.max())
    q25, q75 = np.percentile(y, [25, 75])
    iqr = q75 - q25
    if iqr > 0:
        width = 2.0 * iqr * n ** (-1.0 / 3.0)
        # guard against ceil(10.000000000000002) style float noise
        n_bins = max(1, math.ceil((hi - lo) / width - 1e-9))
        if n_bins > n:
            # a tiny IQR under a long tail would ask for millions of mostly empty bins
            logger.warning("fd_bins: capping %d bins at the sample size %d", n_bins, n)
            n_bins = n
    else:
        n_bins = max(2, math.ceil(n ** (1.0 / 3.0) - 1e-9))
        logger.warning("fd_bins: zero IQR, falling back to %d uniform bins", n_bins)
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, n_bins + 1)


def assign_bins(y: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Half-open bins [e_t, e_t+1), last bin closed; out-of-range values clamp."""
    return np.searchsorted(edges[1:-1], np.asarray(y, dtype=np.float64), side="right")


@dataclass
class TargetCodec:
    task: TaskType
    n_classes: int | None = None
    mean: float = 0.0
    std: float = 1.0
    bin_edges: np.ndarray | None = None

    @classmethod
    def fit(cls, task: TaskType, y_train: np.ndarray, n_classes: int | None = None):
        if task.is_classification:
            return cls(task=task, n_classes=n_classes)
        y_train = np.asarray(y_train, dtype=np.float64)
        std = float(y_train.std())
        if not std > 0:
            raise DataError("regression target has zero standard deviation on train split")
        return cls(task=task, mean=float(y_train.mean()), std=std, bin_edges=fd_bins(y_train))

    @property
    def condition_width(self) -> int:
        return self.n_classes if self.task.is_classification else 1

    @property
    def n_groups(self) -> int:
        """Number of label groups used for target-conditional sampling."""
        return self.n_classes if self.task.is_classification else len(self.bin_edges) - 1

    def encode(self, y: np.ndarray) -> np.ndarray:
        """Model-space target: scaled float for regression, class index otherwise."""
        if self.task.is_classification:
            return np.asarray(y, dtype=np.int64)
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def decode(self, pred: np.ndarray) -> np.ndarray:
        if self.task.is_classification:
            return pred
        return np.asarray(pred) * self.std + self.mean

    def condition(self, y: np.ndarray) -> np.ndarray:
        """Representation concatenated to z by target-conditioned heads."""
        if self.task.is_classification:
            return np.eye(self.n_classes)[np.asarray(y, dtype=np.int64)]
        return self.encode(y)[:, None]

    def groups(self, y: np.ndarray) -> np.ndarray:
        """Class index, or Freedman-Diaconis bin index for regression."""
        if self.task.is_classification:
            return np.asarray(y, dtype=np.int64)
        return assign_bins(y, self.bin_edges)


# ----------------------------------------------------------------- prepared view


@dataclass(eq=False)
class Prepared:
    """A dataset with train-fitted preprocessing applied; what models consume."""

    dataset: Dataset
    x_num: np.ndarray
    x_cat: np.ndarray
    y: np.ndarray  # raw targets
    y_model: np.ndarray  # encoded targets
    groups: np.ndarray  # class / target-bin labels
    codec: TargetCodec
    transform: QuantileTransform | None

    @property
    def task(self) -> TaskType:
        return self.dataset.task

    @property
    def splits(self) -> dict[str, np.ndarray]:
        return self.dataset.splits

    @property
    def batch_size(self) -> int:
        return self.dataset.batch_size

    @property
    def n_features(self) -> int:
        return self.x_num.shape[1] + self.x_cat.shape[1]


def prepare(ds: Dataset, seed: int = 0) -> Prepared:
    train = ds.splits["train"]
    transform = None
    x_num = ds.x_num.astype(np.float64)
    if ds.n_num and ds.preprocess == "quantile":
        transform = fit_quantile_transform(ds.x_num[train], seed=seed)
        x_num = transform.transform(ds.x_num)
    codec = TargetCodec.fit(ds.task, ds.y[train], ds.n_classes)
    return Prepared(
        dataset=ds,
        x_num=x_num,
        x_cat=ds.x_cat,
        y=ds.y,
        y_model=codec.encode(ds.y),
        groups=codec.groups(ds.y),
        codec=codec,
        transform=transform,
    )


def batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index batches; shuffled when `rng` is given, last partial batch kept."""
    indices = np.asarray(indices)
    if rng is not None:
        indices = indices[rng.permutation(len(indices))]
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def split_batches(ds: Dataset | Prepared, split: str, batch_size: int | None = None,
                  rng: np.random.Generator | None = None):
    """Train batches are shuffled with `rng`; val/test are sequential."""
    idx = ds.splits[split]
    if len(idx) == 0:
        raise DataError(f"empty split '{split}'")
    return batches(idx, batch_size or ds.batch_size, rng if split == "train" else None)


def random_splits(n: int, sizes: tuple[int, int, int], seed: int) -> dict[str, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    a, b, c = sizes
    if a + b + c > n:
        raise DataError(f"split sizes {sizes} exceed {n} rows")
    return {"train": np.sort(perm[:a]), "val": np.sort(perm[a : a + b]),
            "test": np.sort(perm[a + b : a + b + c])}
