"""Pretraining objectives and their wiring to corruption and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corrupt as cr
from . import diffcore as dc
from .data import Prepared, TaskType
from .model import ModelState, backbone_forward, head_forward

KINDS = ("contrastive", "rec", "mask", "sup", "supcon",
         "rec_sup", "mask_sup", "rec_target", "mask_target")

_MASKED = -1e9


class ObjectiveError(ValueError):
    pass


@dataclass
class Objective:
    kind: str = "mask"
    temperature: float = 1.0
    # contrastive only: also use the other clean anchors as negatives
    clean_negatives: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ObjectiveError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if self.temperature <= 0:
            raise ObjectiveError("temperature must be positive")

    @property
    def pretrain_output(self) -> str | None:
        if self.kind in ("contrastive", "supcon"):
            return "proj"
        if self.kind.startswith("rec"):
            return "rec"
        if self.kind.startswith("mask"):
            return "mask"
        return None

    @property
    def target_conditioned(self) -> bool:
        return self.kind.endswith("_target")

    @property
    def uses_supervised(self) -> bool:
        return self.kind in ("sup", "rec_sup", "mask_sup")

    @property
    def uses_labels(self) -> bool:
        return self.uses_supervised or self.target_conditioned or self.kind == "supcon"

    def check_model(self, state: ModelState) -> None:
        spec = state.spec
        if spec.pretrain_output != self.pretrain_output:
            raise ObjectiveError(f"objective {self.kind} needs pretraining head "
                                 f"{self.pretrain_output!r}, model has {spec.pretrain_output!r}")
        if spec.target_conditioned != self.target_conditioned:
            raise ObjectiveError(f"objective {self.kind}: target_conditioned mismatch")


# --------------------------------------------------------------------- losses


def loss_reconstruction(pred, x_num: np.ndarray, x_cat: np.ndarray, cardinalities) -> dc.Tensor:
    """Mean over all cells: squared error on numeric columns, CE on categorical ones.

    Categorical cells holding the reserved unknown code have no target class and are skipped.
    """
    b, m_num = x_num.shape
    n_cells = b * m_num
    total = None
    if m_num:
        diff = dc.sub(pred[:, :m_num], x_num)
        total = dc.tsum(dc.mul(diff, diff))
    start = m_num
    for j, card in enumerate(cardinalities):
        known = x_cat[:, j] < card
        logits = pred[:, start : start + card]
        if not known.all():
            logits = dc.getitem(logits, np.flatnonzero(known))
        if known.any():
            ce = dc.cross_entropy(logits, x_cat[known, j], reduction="sum")
            total = ce if total is None else dc.add(total, ce)
        n_cells += int(known.sum())
        start += card
    if total is None:
        return dc.Tensor(np.array(0.0))
    return dc.mul(total, 1.0 / n_cells)


def loss_mask(logits, mask: np.ndarray) -> dc.Tensor:
    return dc.bce_with_logits(logits, mask)


def l2_normalize(x) -> dc.Tensor:
    sq = dc.tsum(dc.mul(x, x), axis=1, keepdims=True)
    # guard only all-zero rows so every other row is normalized exactly
    return dc.div(x, dc.sqrt(dc.add(sq, np.where(sq.data == 0.0, 1e-24, 0.0))))


def loss_contrastive(anchor, positive, temperature: float = 1.0,
                     clean_negatives: bool = False) -> dc.Tensor:
    """InfoNCE: row i's positive is positive[i]; other rows' positives are negatives."""
    b = anchor.shape[0]
    if b < 2:
        raise ObjectiveError("contrastive requires negatives (batch of at least 2)")
    a = l2_normalize(anchor)
    p = l2_normalize(positive)
    logits = dc.mul(dc.einsum("id,jd->ij", a, p), 1.0 / temperature)
    if clean_negatives:
        self_sim = dc.mul(dc.einsum("id,jd->ij", a, a), 1.0 / temperature)
        self_sim = dc.add(self_sim, np.diag(np.full(b, _MASKED)))
        logits = dc.concat([logits, self_sim], axis=1)
    return dc.cross_entropy(logits, np.arange(b))


def loss_supcon(z, labels: np.ndarray, temperature: float = 1.0) -> dc.Tensor:
    """Supervised contrastive loss; anchors without a same-label peer are skipped."""
    labels = np.asarray(labels)
    n = z.shape[0]
    same = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    counts = same.sum(axis=1)
    valid = counts > 0
    if n < 2 or not valid.any():
        raise ObjectiveError("supcon: no anchor has a positive in the batch")
    u = l2_normalize(z)
    sim = dc.mul(dc.einsum("id,jd->ij", u, u), 1.0 / temperature)
    sim = dc.add(sim, np.diag(np.full(n, _MASKED)))
    log_prob = dc.sub(sim, dc.logsumexp(sim, axis=1, keepdims=True))
    weights = np.where(valid[:, None], same / np.maximum(counts, 1)[:, None], 0.0)
    return dc.mul(dc.tsum(dc.mul(log_prob, weights)), -1.0 / valid.sum())


def loss_supervised(out, y_model: np.ndarray, task: TaskType) -> dc.Tensor:
    if task is TaskType.REGRESSION:
        return dc.mse(dc.reshape(out, (out.shape[0],)), np.asarray(y_model, dtype=np.float64))
    if task is TaskType.BINCLASS:
        return dc.bce_with_logits(dc.reshape(out, (out.shape[0],)), y_model)
    return dc.cross_entropy(out, y_model)


# -------------------------------------------------------------------- compose


@dataclass
class CorruptionSource:
    """Resampling pools drawn from the training split only."""

    pool_num: np.ndarray
    pool_cat: np.ndarray
    conditional: cr.ConditionalIndex | None

    @classmethod
    def from_prepared(cls, prep: Prepared, conditional: bool = False) -> "CorruptionSource":
        train = prep.splits["train"]
        index = None
        if conditional:
            index = cr.ConditionalIndex.build(prep.groups[train], prep.codec.n_groups,
                                              prep.task.is_classification)
        return cls(prep.x_num[train], prep.x_cat[train], index)


def corrupt_batch(objective: Objective, source: CorruptionSource, x_num, x_cat, groups, p, rng):
    if objective.target_conditioned:
        if source.conditional is None:
            raise ObjectiveError("target-conditional corruption needs a conditional index")
        return cr.corrupt_conditional(x_num, x_cat, groups, p, source.conditional,
                                      source.pool_num, source.pool_cat, rng)
    return cr.corrupt_marginal(x_num, x_cat, p, source.pool_num, source.pool_cat, rng)


def compose(objective: Objective, prep: Prepared, rows: np.ndarray, state: ModelState,
            source: CorruptionSource, p: float, rng: np.random.Generator,
            tensors=None, train_mode=True):
    """Total pretraining loss on one batch plus its named terms (floats)."""
    x_num, x_cat = prep.x_num[rows], prep.x_cat[rows]
    groups = prep.groups[rows]
    plan = corrupt_batch(objective, source, x_num, x_cat, groups, p, rng)

    def f(xn, xc):
        return backbone_forward(state, xn, xc, train_mode, rng, tensors)

    terms: dict[str, dc.Tensor] = {}
    kind = objective.kind
    if kind == "contrastive":
        anchor = head_forward(state, f(x_num, x_cat), "h", tensors=tensors)
        positive = head_forward(state, f(plan.x_num, plan.x_cat), "h", tensors=tensors)
        terms["contrastive"] = loss_contrastive(anchor, positive, objective.temperature,
                                                objective.clean_negatives)
    elif kind == "supcon":
        z = f(np.concatenate([x_num, plan.x_num]), np.concatenate([x_cat, plan.x_cat]))
        proj = head_forward(state, z, "h", tensors=tensors)
        terms["supcon"] = loss_supcon(proj, np.concatenate([groups, groups]), objective.temperature)
    else:
        z = f(plan.x_num, plan.x_cat)
        out = objective.pretrain_output
        if out is not None:
            cond = prep.codec.condition(prep.y[rows]) if objective.target_conditioned else None
            pred = head_forward(state, z, "h", condition=cond, tensors=tensors)
            if out == "rec":
                terms["rec"] = loss_reconstruction(pred, x_num, x_cat, state.meta.cat_cardinalities)
            else:
                terms["mask"] = loss_mask(pred, plan.mask)
        if objective.uses_supervised:
            terms["sup"] = loss_supervised(head_forward(state, z, "g", tensors=tensors),
                                           prep.y_model[rows], prep.task)
    parts = list(terms.values())
    total = parts[0]
    for t in parts[1:]:
        total = dc.add(total, t)
    return total, {k: float(v.data) for k, v in terms.items()}


def model_heads(objective: Objective) -> dict:
    """ModelSpec fields implied by an objective."""
    return {"pretrain_output": objective.pretrain_output,
            "target_conditioned": objective.target_conditioned}
