"""Converters from raw public files to the dataset-directory format."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import Dataset, DataError, TaskType, random_splits

CA_SIZES = (13209, 3303, 4128)
CHURN_SIZES = (6400, 1600, 2000)
CHURN_NUM = ("CreditScore", "Gender", "Age", "Tenure", "Balance", "NumOfProducts", "HasCrCard",
             "IsActiveMember", "EstimatedSalary")
CHURN_CAT = ("Geography",)


def california(seed: int = 0, data_home=None) -> Dataset:
    """California Housing via scikit-learn's fetcher (downloads once, then cached)."""
    from sklearn.datasets import fetch_california_housing

    try:
        raw = fetch_california_housing(data_home=data_home)
    except OSError as exc:
        raise DataError(f"California Housing is not cached and could not be downloaded: {exc}") from None
    x = np.asarray(raw.data, dtype=np.float64)
    y = np.asarray(raw.target, dtype=np.float64)
    return Dataset(name="california", task=TaskType.REGRESSION, x_num=x,
                   x_cat=np.zeros((len(x), 0), dtype=np.int64), y=y,
                   splits=random_splits(len(x), CA_SIZES, seed), batch_size=128,
                   num_names=list(raw.feature_names))


def _read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cat_codes(values: list[str], train: np.ndarray) -> tuple[np.ndarray, list[str]]:
    vocab = sorted({values[i] for i in train})
    index = {v: i for i, v in enumerate(vocab)}
    return np.array([index.get(v, len(vocab)) for v in values], dtype=np.int64), vocab


def churn(path, seed: int = 0) -> Dataset:
    """Bank churn table (`Churn_Modelling.csv`): numeric columns with `Gender` as 0/1, Geography categorical."""
    rows = _read_rows(path)
    missing = {"Exited", *CHURN_NUM, *CHURN_CAT} - set(rows[0] if rows else ())
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    n = len(rows)
    sizes = CHURN_SIZES if n == sum(CHURN_SIZES) else _proportional(n, CHURN_SIZES)
    splits = random_splits(n, sizes, seed)

    def num(r, c):
        return float(r[c] == "Female") if c == "Gender" else float(r[c])

    x = np.array([[num(r, c) for c in CHURN_NUM] for r in rows])
    codes, vocab = _cat_codes([r["Geography"] for r in rows], splits["train"])
    y = np.array([int(r["Exited"]) for r in rows], dtype=np.int64)
    return Dataset(name="churn", task=TaskType.BINCLASS, x_num=x, x_cat=codes[:, None], y=y,
                   splits=splits, batch_size=128, n_classes=2, num_names=list(CHURN_NUM),
                   cat_names=list(CHURN_CAT), cat_vocab=[vocab], class_names=["0", "1"])


def _proportional(n, sizes):
    total = sum(sizes)
    a = int(round(n * sizes[0] / total))
    b = int(round(n * sizes[1] / total))
    return (a, b, n - a - b)


def from_csv(path, target: str, task: TaskType, cat_columns=(), sizes=(0.64, 0.16, 0.2),
             seed: int = 0, batch_size: int = 128, name: str | None = None) -> Dataset:
    """Generic CSV with a header; every non-target, non-categorical column must be numeric."""
    rows = _read_rows(path)
    if not rows or target not in rows[0]:
        raise DataError(f"{path}: target column {target!r} not found")
    n = len(rows)
    if all(isinstance(s, float) and s < 1 for s in sizes):
        sizes = _proportional(n, sizes)
    splits = random_splits(n, tuple(int(s) for s in sizes), seed)
    num_cols = [c for c in rows[0] if c != target and c not in cat_columns]
    try:
        x = np.array([[float(r[c]) for c in num_cols] for r in rows]).reshape(n, len(num_cols))
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value in a numeric column ({exc})") from None
    cats, vocabs = [], []
    for c in cat_columns:
        codes, vocab = _cat_codes([r[c] for r in rows], splits["train"])
        cats.append(codes)
        vocabs.append(vocab)
    x_cat = np.stack(cats, axis=1) if cats else np.zeros((n, 0), dtype=np.int64)
    raw_y = [r[target] for r in rows]
    class_names = []
    if task.is_classification:
        class_names = sorted(set(raw_y))
        y = np.array([class_names.index(v) for v in raw_y], dtype=np.int64)
    else:
        y = np.array([float(v) for v in raw_y])
    return Dataset(name=name or Path(path).stem, task=task, x_num=x, x_cat=x_cat, y=y, splits=splits,
                   batch_size=batch_size, n_classes=len(class_names) if class_names else None,
                   num_names=num_cols, cat_names=list(cat_columns), cat_vocab=vocabs,
                   class_names=class_names)
