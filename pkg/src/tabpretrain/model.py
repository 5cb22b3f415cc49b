"""MLP backbone with optional PLR / T-LR numeric embeddings, plus heads.

Parameters live in a flat ordered dict of numpy arrays (`ModelState.params`).
A forward pass wraps them in autodiff leaves; pass `tensors=state.tensors()`
to get gradients, or leave it out for inference.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

from . import diffcore as dc
from .data import Prepared, TaskType

LAYER_SIZE = 512
HEAD_HIDDEN = 512
PROJECTION_DIM = 128
PRETRAIN_OUTPUTS = ("rec", "mask", "proj")


class ModelSpecError(ValueError):
    pass


@dataclass
class EmbeddingSpec:
    kind: str = "none"  # none | plr | tlr
    d_emb: int = 16
    # plr
    k: int = 16
    sigma: float = 1.0
    # tlr
    max_leaves: int = 16
    min_leaf: int = 16
    min_gain: float = 1e-6

    def validate(self):
        if self.kind not in ("none", "plr", "tlr"):
            raise ModelSpecError(f"unknown embedding kind {self.kind!r}")
        if self.kind == "none":
            return
        if not 1 <= self.d_emb <= 128:
            raise ModelSpecError(f"d_emb must be in [1, 128], got {self.d_emb}")
        if self.kind == "plr" and (not 1 <= self.k <= 128 or self.sigma <= 0):
            raise ModelSpecError("plr needs k in [1, 128] and sigma > 0")
        if self.kind == "tlr" and (self.max_leaves < 2 or self.min_leaf < 1 or self.min_gain < 0):
            raise ModelSpecError("tlr needs max_leaves >= 2, min_leaf >= 1, min_gain >= 0")


@dataclass
class ModelSpec:
    layers: int = 2
    dropout: float = 0.0
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    pretrain_output: str | None = None  # rec | mask | proj
    target_conditioned: bool = False
    layer_size: int = LAYER_SIZE
    head_hidden: int = HEAD_HIDDEN

    def validate(self):
        if not 1 <= self.layers <= 8:
            raise ModelSpecError(f"layers must be in [1, 8], got {self.layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelSpecError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pretrain_output not in (None, *PRETRAIN_OUTPUTS):
            raise ModelSpecError(f"unknown pretraining head {self.pretrain_output!r}")
        if self.target_conditioned and self.pretrain_output is None:
            raise ModelSpecError("target_conditioned needs a pretraining head")
        self.embedding.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        emb = EmbeddingSpec(**d.pop("embedding", {}))
        return cls(embedding=emb, **d)


@dataclass
class DataMeta:
    """What a model needs to know about its data, independent of the rows."""

    task: TaskType
    n_num: int
    cat_cardinalities: list[int]
    n_classes: int | None = None

    @classmethod
    def of(cls, prep: Prepared) -> "DataMeta":
        ds = prep.dataset
        return cls(ds.task, ds.n_num, ds.cat_cardinalities, ds.n_classes)

    @property
    def n_features(self) -> int:
        return self.n_num + len(self.cat_cardinalities)

    @property
    def out_width(self) -> int:
        return self.n_classes if self.task is TaskType.MULTICLASS else 1

    @property
    def condition_width(self) -> int:
        return self.n_classes if self.task.is_classification else 1

    def to_dict(self):
        return {"task": self.task.value, "n_num": self.n_num,
                "cat_cardinalities": list(self.cat_cardinalities), "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d):
        return cls(TaskType(d["task"]), d["n_num"], list(d["cat_cardinalities"]), d["n_classes"])


def cat_embedding_dim(cardinality: int) -> int:
    return max(1, min(cardinality, 16))


def pretrain_width(kind: str, meta: DataMeta) -> int:
    if kind == "rec":
        return meta.n_num + sum(meta.cat_cardinalities)
    if kind == "mask":
        return meta.n_features
    return PROJECTION_DIM


@dataclass(eq=False)
class ModelState:
    spec: ModelSpec
    meta: DataMeta
    params: dict[str, np.ndarray]
    tlr_edges: list[np.ndarray] = field(default_factory=list)

    def tensors(self) -> dict[str, dc.Tensor]:
        return {k: dc.parameter(v, k) for k, v in self.params.items()}

    def clone(self) -> "ModelState":
        return ModelState(copy.deepcopy(self.spec), self.meta,
                          {k: v.copy() for k, v in self.params.items()},
                          [e.copy() for e in self.tlr_edges])

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            self.params[k][...] = v

    def n_parameters(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    @property
    def backbone_input_width(self) -> int:
        emb = self.spec.embedding
        num_width = self.meta.n_num * (emb.d_emb if emb.kind != "none" else 1)
        return num_width + sum(cat_embedding_dim(c) for c in self.meta.cat_cardinalities)

    def checkpoint_meta(self) -> dict:
        return {"spec": self.spec.to_dict(), "data": self.meta.to_dict(),
                "tlr_edges": [e.tolist() for e in self.tlr_edges]}

    def save(self, path, step: int = 0, extra: dict | None = None) -> None:
        meta = self.checkpoint_meta()
        meta.update(extra or {})
        dc.save_checkpoint(path, self.params, step=step, meta=meta)

    @classmethod
    def load(cls, path) -> "ModelState":
        arrays, _, meta = dc.load_checkpoint(path)
        params = {k: v for k, v in arrays.items() if not k.startswith("adamw.")}
        return cls(ModelSpec.from_dict(meta["spec"]), DataMeta.from_dict(meta["data"]), params,
                   [np.asarray(e) for e in meta.get("tlr_edges", [])])


# ------------------------------------------------------------------ building


def _kaiming_uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_linear(params, rng, name, d_in, d_out):
    params[f"{name}.weight"] = _kaiming_uniform(rng, d_in, (d_in, d_out))
    params[f"{name}.bias"] = np.zeros(d_out)


def fit_tlr_edges(x: np.ndarray, target: np.ndarray, classification: bool,
                  emb: EmbeddingSpec) -> list[np.ndarray]:
    """Per-feature bin edges: [min, sorted tree thresholds..., max]."""
    edges = []
    tree_cls = DecisionTreeClassifier if classification else DecisionTreeRegressor
    for j in range(x.shape[1]):
        col = x[:, j]
        tree = tree_cls(max_leaf_nodes=emb.max_leaves, min_samples_leaf=emb.min_leaf,
                        min_impurity_decrease=emb.min_gain, random_state=0)
        tree.fit(col[:, None], target)
        thresholds = tree.tree_.threshold[tree.tree_.feature >= 0]
        e = np.unique(np.concatenate([[col.min()], thresholds, [col.max()]]))
        if len(e) == 1:
            e = np.array([e[0], e[0] + 1.0])
        edges.append(e)
    return edges


def build(spec: ModelSpec, meta: DataMeta, rng: np.random.Generator,
          prep: Prepared | None = None) -> ModelState:
    spec.validate()
    emb = spec.embedding
    if emb.kind != "none" and meta.n_num == 0:
        raise ModelSpecError(f"{emb.kind} embedding needs numeric features")
    params: dict[str, np.ndarray] = {}
    tlr_edges: list[np.ndarray] = []

    for j, card in enumerate(meta.cat_cardinalities):
        params[f"cat_emb.{j}"] = rng.normal(0.0, 1.0, size=(card + 1, cat_embedding_dim(card)))

    if emb.kind == "plr":
        params["plr.coef"] = rng.normal(0.0, emb.sigma, size=(meta.n_num, emb.k))
        params["plr.weight"] = _kaiming_uniform(rng, 2 * emb.k, (meta.n_num, 2 * emb.k, emb.d_emb))
        params["plr.bias"] = np.zeros((meta.n_num, emb.d_emb))
    elif emb.kind == "tlr":
        if prep is None:
            raise ModelSpecError("tlr embedding needs training data to fit bins")
        train = prep.splits["train"]
        target = prep.y_model[train]
        tlr_edges = fit_tlr_edges(prep.x_num[train], target, meta.task.is_classification, emb)
        n_bins = max(len(e) - 1 for e in tlr_edges)
        params["tlr.weight"] = _kaiming_uniform(rng, n_bins, (meta.n_num, n_bins, emb.d_emb))
        params["tlr.bias"] = np.zeros((meta.n_num, emb.d_emb))

    state = ModelState(spec, meta, params, tlr_edges)
    d_in = state.backbone_input_width
    for i in range(spec.layers):
        _add_linear(params, rng, f"backbone.{i}", d_in, spec.layer_size)
        d_in = spec.layer_size

    _add_linear(params, rng, "g", spec.layer_size, meta.out_width)

    if spec.pretrain_output is not None:
        h_in = spec.layer_size + (meta.condition_width if spec.target_conditioned else 0)
        _add_linear(params, rng, "h.0", h_in, spec.head_hidden)
        _add_linear(params, rng, "h.1", spec.head_hidden, pretrain_width(spec.pretrain_output, meta))
    return state


def reset_head(state: ModelState, rng: np.random.Generator, name: str = "g") -> None:
    w = state.params[f"{name}.weight"]
    w[...] = _kaiming_uniform(rng, w.shape[0], w.shape)
    state.params[f"{name}.bias"][...] = 0.0


# ------------------------------------------------------------------- forward


def ple_encode(x: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    """Piecewise-linear encoding, (batch, m) -> (batch, m, max_bins), zero padded."""
    n_bins = max(len(e) - 1 for e in edges)
    out = np.zeros((x.shape[0], len(edges), n_bins))
    for j, e in enumerate(edges):
        lo, hi = e[:-1], e[1:]
        out[:, j, : len(lo)] = np.clip((x[:, j, None] - lo) / (hi - lo), 0.0, 1.0)
    return out


def _leaf(state, tensors, name):
    return tensors[name] if tensors is not None else dc.Tensor(state.params[name])


def periodic(x, coef) -> dc.Tensor:
    """[cos(2*pi*c*x), sin(2*pi*c*x)] per feature: (batch, m) -> (batch, m, 2k)."""
    v = dc.mul(dc.reshape(x, (x.shape[0], x.shape[1], 1)), dc.mul(coef, 2.0 * math.pi))
    return dc.concat([dc.cos(v), dc.sin(v)], axis=-1)


def embed_inputs(state: ModelState, x_num: np.ndarray, x_cat: np.ndarray, tensors=None) -> dc.Tensor:
    emb = state.spec.embedding
    b = x_num.shape[0]
    parts = []
    if state.meta.n_num:
        if emb.kind == "none":
            parts.append(dc.Tensor(x_num))
        else:
            if emb.kind == "plr":
                feats = periodic(dc.Tensor(x_num), _leaf(state, tensors, "plr.coef"))
            else:
                feats = dc.Tensor(ple_encode(x_num, state.tlr_edges))
            w = _leaf(state, tensors, f"{emb.kind}.weight")
            bias = _leaf(state, tensors, f"{emb.kind}.bias")
            e = dc.relu(dc.add(dc.einsum("bmk,mkd->bmd", feats, w), bias))
            parts.append(dc.reshape(e, (b, state.meta.n_num * emb.d_emb)))
    for j in range(len(state.meta.cat_cardinalities)):
        parts.append(dc.embedding(_leaf(state, tensors, f"cat_emb.{j}"), x_cat[:, j]))
    return parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)


def backbone_forward(state: ModelState, x_num, x_cat, train_mode=False,
                     rng: np.random.Generator | None = None, tensors=None) -> dc.Tensor:
    h = embed_inputs(state, x_num, x_cat, tensors)
    for i in range(state.spec.layers):
        h = dc.linear(h, _leaf(state, tensors, f"backbone.{i}.weight"),
                      _leaf(state, tensors, f"backbone.{i}.bias"))
        h = dc.dropout(dc.relu(h), state.spec.dropout, rng, train_mode)
    return h


def head_forward(state: ModelState, z: dc.Tensor, head: str = "g", condition=None,
                 tensors=None) -> dc.Tensor:
    """`head` is "g" (downstream) or "h" (pretraining); `condition` feeds a target-conditioned h."""
    if head == "g":
        return dc.linear(z, _leaf(state, tensors, "g.weight"), _leaf(state, tensors, "g.bias"))
    if head != "h":
        raise ValueError(f"unknown head {head!r}")
    if state.spec.pretrain_output is None:
        raise ModelSpecError("model has no pretraining head")
    if condition is not None:
        if not state.spec.target_conditioned:
            raise ModelSpecError("target-conditioned head requested but spec lacks the flag")
        z = dc.concat([z, dc.Tensor(condition)], axis=1)
    elif state.spec.target_conditioned:
        raise ModelSpecError("target-conditioned head needs the encoded target")
    hidden = dc.relu(dc.linear(z, _leaf(state, tensors, "h.0.weight"), _leaf(state, tensors, "h.0.bias")))
    return dc.linear(hidden, _leaf(state, tensors, "h.1.weight"), _leaf(state, tensors, "h.1.bias"))


def predict(state: ModelState, x_num, x_cat, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode downstream head outputs: (n,) for single-output tasks else (n, k)."""
    outs = []
    for start in range(0, len(x_num), batch_size):
        sl = slice(start, start + batch_size)
        z = backbone_forward(state, x_num[sl], x_cat[sl])
        outs.append(head_forward(state, z, "g").data)
    out = np.concatenate(outs, axis=0) if outs else np.zeros((0, state.meta.out_width))
    return out[:, 0] if state.meta.out_width == 1 else out


def embed(state: ModelState, x_num, x_cat, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode backbone outputs z."""
    return np.concatenate([backbone_forward(state, x_num[s:s + batch_size], x_cat[s:s + batch_size]).data
                           for s in range(0, len(x_num), batch_size)], axis=0)
