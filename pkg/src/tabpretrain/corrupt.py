"""Feature-resampling corruption: marginal and target-conditional."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

# per-process count of sampler invocations, keyed by policy
CALLS: Counter = Counter()

MAX_TARGET_RETRIES = 10


class DegenerateTargetError(ValueError):
    pass


@dataclass
class CorruptionPlan:
    x_num: np.ndarray
    x_cat: np.ndarray
    mask: np.ndarray  # (batch, m_num + m_cat); 1 = column selected for replacement
    policy: str
    p: float
    y_hat: np.ndarray | None = None  # replacement target group per row (conditional only)


def _draw_mask(rng, shape, p):
    return (rng.random(shape) < p).astype(np.float64)


def _apply(x_num, x_cat, mask, donors, pool_num, pool_cat):
    m_num = x_num.shape[1]
    cols_num = np.arange(m_num)
    cols_cat = np.arange(x_cat.shape[1])
    rep_num = pool_num[donors[:, :m_num], cols_num]
    rep_cat = pool_cat[donors[:, m_num:], cols_cat]
    sel = mask.astype(bool)
    out_num = np.where(sel[:, :m_num], rep_num, x_num)
    out_cat = np.where(sel[:, m_num:], rep_cat, x_cat)
    return out_num, out_cat


def corrupt_marginal(x_num, x_cat, p: float, pool_num, pool_cat, rng: np.random.Generator):
    """Replace each cell with probability p by the same column of a random pool row.

    Donor rows are drawn independently per cell.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"corruption probability must be in [0, 1], got {p}")
    if len(pool_num) == 0:
        raise ValueError("empty resampling pool")
    CALLS["marginal"] += 1
    b = x_num.shape[0]
    m = x_num.shape[1] + x_cat.shape[1]
    mask = _draw_mask(rng, (b, m), p)
    donors = rng.integers(0, len(pool_num), size=(b, m))
    out_num, out_cat = _apply(x_num, x_cat, mask, donors, pool_num, pool_cat)
    return CorruptionPlan(out_num, out_cat, mask, "marginal", p)


@dataclass
class ConditionalIndex:
    """Train-row positions grouped by class / target bin.

    Rows of group g are `order[offsets[g]:offsets[g + 1]]`.
    """

    order: np.ndarray
    offsets: np.ndarray
    candidates: np.ndarray  # groups eligible as replacement targets

    @classmethod
    def build(cls, groups: np.ndarray, n_groups: int, classification: bool = True):
        groups = np.asarray(groups, dtype=np.int64)
        order = np.argsort(groups, kind="stable")
        counts = np.bincount(groups, minlength=n_groups)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        if classification:
            candidates = np.arange(n_groups)
        else:
            candidates = np.flatnonzero(counts)
        if len(np.flatnonzero(counts)) < 2:
            raise DegenerateTargetError("degenerate target distribution")
        return cls(order=order, offsets=offsets, candidates=candidates)

    def pool(self, group: int) -> np.ndarray:
        return self.order[self.offsets[group] : self.offsets[group + 1]]

    def size(self, groups: np.ndarray) -> np.ndarray:
        return self.offsets[groups + 1] - self.offsets[groups]


def sample_replacement_target(groups, index: ConditionalIndex, rng: np.random.Generator):
    """Draw, per row, a group uniformly from the eligible groups other than its own."""
    groups = np.atleast_1d(np.asarray(groups, dtype=np.int64))
    cands = index.candidates
    if len(cands) < 2:
        raise DegenerateTargetError("degenerate target distribution")
    pos = np.searchsorted(cands, groups)
    own_present = (pos < len(cands)) & (cands[np.minimum(pos, len(cands) - 1)] == groups)
    out = np.empty_like(groups)
    r = rng.integers(0, len(cands) - 1, size=len(groups))
    shifted = np.where(r >= pos, r + 1, r)
    out[own_present] = cands[shifted[own_present]]
    if (~own_present).any():
        out[~own_present] = cands[rng.integers(0, len(cands), size=int((~own_present).sum()))]
    return out


def corrupt_conditional(x_num, x_cat, groups, p: float, index: ConditionalIndex, pool_num,
                        pool_cat, rng: np.random.Generator):
    """Resample masked cells from pool rows whose label is a freshly drawn y_hat != y.

    `pool_num`/`pool_cat` are the pool's feature arrays; `index` positions refer to them.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"corruption probability must be in [0, 1], got {p}")
    CALLS["target_conditional"] += 1
    b = x_num.shape[0]
    m = x_num.shape[1] + x_cat.shape[1]
    y_hat = sample_replacement_target(groups, index, rng)
    for _ in range(MAX_TARGET_RETRIES):
        empty = index.size(y_hat) == 0
        if not empty.any():
            break
        y_hat[empty] = sample_replacement_target(np.asarray(groups)[empty], index, rng)
    else:
        raise DegenerateTargetError("could not draw a replacement target with a non-empty pool")
    mask = _draw_mask(rng, (b, m), p)
    sizes = index.size(y_hat)[:, None]
    pick = np.minimum((rng.random((b, m)) * sizes).astype(np.int64), sizes - 1)
    donors = index.order[index.offsets[y_hat][:, None] + pick]
    out_num, out_cat = _apply(x_num, x_cat, mask, donors, pool_num, pool_cat)
    return CorruptionPlan(out_num, out_cat, mask, "target_conditional", p, y_hat=y_hat)
