"""Histogram-based gradient-boosted trees with logistic loss.

Trees are grown leaf-wise (best first) on per-feature histograms, with the
standard second-order gain and Newton leaf values -G/(H + lambda). The
fine-tuning step keeps the pooled global model's trees and appends new ones
fit only on the target index's sample at a reduced learning rate, so a
zero-round fine-tune is prediction-identical to the global model.

Determinism contract: fixed inputs and hyperparameters give an identical
model; ties in split gain break toward the lowest feature index, then the
lowest bin.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PriceSeries, month_boundaries
from .errors import ValidationError

MODEL_VERSION = "1"


@dataclass
class GbdtConfig:
    learning_rate: float = 0.1
    n_rounds: int = 200
    max_leaves: int = 31
    max_depth: int = -1  # -1 = unlimited
    max_bin: int = 255
    min_child_samples: int = 5
    reg_lambda: float = 1.0
    patience: int = 20

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.max_leaves < 1 or self.max_bin < 2:
            raise ValidationError("max_leaves and max_bin must be sensible")


@dataclass
class FineTuneOverrides:
    """Target-sample continuation settings; None halves the global rate."""

    learning_rate: float | None = None
    max_leaves: int = 31
    n_rounds: int = 200
    patience: int = 10


@dataclass
class ExampleSet:
    """Columnar batch of labeled examples (x, y, month, index)."""

    X: np.ndarray  # (n, n_features) float64
    y: np.ndarray  # (n,) 0/1
    month: np.ndarray  # (n,) int64 yyyymm
    index_id: np.ndarray  # (n,) unicode

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValidationError("X and y must be aligned")
        if not np.all(np.isin(self.y, (0, 1))):
            raise ValidationError("labels must be 0/1")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("features must be finite")

    def __len__(self) -> int:
        return len(self.y)

    def select_months(self, lo: int, hi: int) -> "ExampleSet":
        mask = (self.month >= lo) & (self.month <= hi)
        return ExampleSet(self.X[mask], self.y[mask], self.month[mask],
                          self.index_id[mask])

    def month_range(self) -> tuple[int, int]:
        return int(self.month.min()), int(self.month.max())


@dataclass
class Tree:
    feature: np.ndarray  # int32, -1 at leaves
    threshold: np.ndarray  # float64, nan at leaves
    left: np.ndarray  # int32, -1 at leaves
    right: np.ndarray  # int32, -1 at leaves
    value: np.ndarray  # float64, leaf outputs (0.0 at internal nodes)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            rows = np.flatnonzero(internal)
            f = feat[rows]
            go_left = X[rows, f] <= self.threshold[node[rows]]
            node[rows] = np.where(
                go_left, self.left[node[rows]], self.right[node[rows]]
            )
        return self.value[node]


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass
class BoostedModel:
    """Additive tree ensemble behind a logistic link."""

    trees: list[Tree]
    shrinkage: list[float]  # per-tree learning rate (fine-tuned trees differ)
    base_score: float  # log-odds of the training prior
    config: GbdtConfig
    n_features: int
    stage: str = "global"
    n_pretrained: int = 0  # leading trees inherited from the global model
    train_months: tuple[int, int] | None = None
    valid_months: tuple[int, int] | None = None
    train_logloss: list[float] = field(default_factory=list)
    valid_logloss: list[float] = field(default_factory=list)

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        margin = np.full(len(X), self.base_score)
        for tree, lr in zip(self.trees, self.shrinkage):
            margin += lr * tree.predict(X)
        return margin

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.predict_margin(X))

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Probabilities and hard labels (threshold 0.5)."""
        proba = self.predict_proba(X)
        return proba, (proba >= 0.5).astype(np.int64)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValidationError(
                f"feature dimension mismatch: got {X.shape[1]}, model expects "
                f"{self.n_features}"
            )
        return X


@dataclass
class _Binned:
    """Histogram layout shared by every leaf of every tree in one fit."""

    edges: list[np.ndarray]  # per-feature split thresholds
    bins: np.ndarray  # (n, n_features) int64 bin index per cell
    flat: np.ndarray  # bins + feature offset, for one-shot bincount
    stride: int
    splittable: np.ndarray  # (n_features, stride - 1) bool: bin is a real edge


def _bin_features(X: np.ndarray, max_bin: int) -> _Binned:
    """Per-feature bin edges (split thresholds) and per-cell bin indices."""
    n, n_features = X.shape
    edges = []
    bins = np.zeros((n, n_features), dtype=np.int64)
    for f in range(n_features):
        uniq = np.unique(X[:, f])
        if len(uniq) <= 1:
            edges.append(np.empty(0))
            continue
        if len(uniq) <= max_bin:
            e = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            qs = np.quantile(X[:, f], np.linspace(0.0, 1.0, max_bin + 1)[1:-1])
            e = np.unique(qs)
        edges.append(e)
        bins[:, f] = np.searchsorted(e, X[:, f], side="left")
    stride = max(len(e) + 1 for e in edges) if edges else 1
    offsets = np.arange(n_features, dtype=np.int64) * stride
    splittable = np.zeros((n_features, max(stride - 1, 1)), dtype=bool)
    for f, e in enumerate(edges):
        splittable[f, : len(e)] = True
    return _Binned(
        edges=edges, bins=bins, flat=bins + offsets, stride=stride,
        splittable=splittable,
    )


def _best_split(rows, binned: _Binned, g, h, config):
    """Best (gain, feature, bin, threshold) for one leaf, or None.

    Gains for every (feature, bin) candidate are evaluated in one vectorized
    pass; the first flat argmax realizes the lowest-feature-then-lowest-bin
    tie-break.
    """
    n_features = binned.bins.shape[1]
    stride = binned.stride
    if stride < 2:
        return None
    flat = binned.flat[rows].ravel()
    size = n_features * stride
    hist_c = np.bincount(flat, minlength=size).reshape(n_features, stride)
    g_rows = np.repeat(g[rows], n_features)
    h_rows = np.repeat(h[rows], n_features)
    hist_g = np.bincount(flat, weights=g_rows, minlength=size)
    hist_h = np.bincount(flat, weights=h_rows, minlength=size)
    hist_g = hist_g.reshape(n_features, stride)
    hist_h = hist_h.reshape(n_features, stride)

    cc = np.cumsum(hist_c, axis=1)[:, :-1]
    cg = np.cumsum(hist_g, axis=1)[:, :-1]
    ch = np.cumsum(hist_h, axis=1)[:, :-1]

    G = float(g[rows].sum())
    H = float(h[rows].sum())
    lam = config.reg_lambda
    parent = G * G / (H + lam)
    count = len(rows)
    ok = (
        binned.splittable
        & (cc >= config.min_child_samples)
        & (count - cc >= config.min_child_samples)
    )
    if not ok.any():
        return None
    gains = np.full(cc.shape, -np.inf)
    gains[ok] = (
        cg[ok] ** 2 / (ch[ok] + lam)
        + (G - cg[ok]) ** 2 / (H - ch[ok] + lam)
        - parent
    )
    i = int(np.argmax(gains))  # row-major first max: lowest feature, lowest bin
    f, b = divmod(i, cc.shape[1])
    if gains[f, b] <= 0:
        return None
    return (float(gains[f, b]), f, b, float(binned.edges[f][b]))


def _grow_tree(X, g, h, binned: _Binned, config) -> Tree:
    lam = config.reg_lambda
    feature = [-1]
    threshold = [np.nan]
    left = [-1]
    right = [-1]
    rows_of = {0: np.arange(len(X))}
    depth_of = {0: 0}
    n_leaves = 1
    counter = 0
    heap = []

    def push(node_id):
        if config.max_depth >= 0 and depth_of[node_id] >= config.max_depth:
            return
        rows = rows_of[node_id]
        if len(rows) < 2 * config.min_child_samples:
            return
        split = _best_split(rows, binned, g, h, config)
        if split is not None:
            nonlocal counter
            heapq.heappush(heap, (-split[0], counter, node_id, split))
            counter += 1

    push(0)
    while heap and n_leaves < config.max_leaves:
        _, _, node_id, (gain, f, b, thr) = heapq.heappop(heap)
        rows = rows_of.pop(node_id)
        go_left = binned.bins[rows, f] <= b
        left_id = len(feature)
        right_id = left_id + 1
        for _ in range(2):
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
        feature[node_id] = f
        threshold[node_id] = thr
        left[node_id] = left_id
        right[node_id] = right_id
        rows_of[left_id] = rows[go_left]
        rows_of[right_id] = rows[~go_left]
        depth_of[left_id] = depth_of[right_id] = depth_of[node_id] + 1
        n_leaves += 1
        push(left_id)
        push(right_id)

    value = np.zeros(len(feature))
    for node_id, rows in rows_of.items():
        value[node_id] = -float(g[rows].sum()) / (float(h[rows].sum()) + lam)
    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=value,
    )


def _boost(model: BoostedModel, train: ExampleSet, valid: ExampleSet | None,
           n_rounds: int, learning_rate: float, config: GbdtConfig) -> None:
    """Append up to n_rounds trees, early-stopping on validation log-loss."""
    y = train.y.astype(np.float64)
    margin = model.predict_margin(train.X)
    start = len(model.trees)
    best_val = np.inf
    best_len = start
    if valid is not None and len(valid):
        margin_val = model.predict_margin(valid.X)
        y_val = valid.y.astype(np.float64)
        # the incoming ensemble is the baseline a new tree must beat
        best_val = log_loss(y_val, _sigmoid(margin_val))
    else:
        valid = None
    binned = _bin_features(train.X, config.max_bin)

    stale = 0
    for _ in range(n_rounds):
        p = _sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        tree = _grow_tree(train.X, g, h, binned, config)
        model.trees.append(tree)
        model.shrinkage.append(learning_rate)
        margin += learning_rate * tree.predict(train.X)
        model.train_logloss.append(log_loss(y, _sigmoid(margin)))
        if valid is not None:
            margin_val += learning_rate * tree.predict(valid.X)
            val = log_loss(y_val, _sigmoid(margin_val))
            model.valid_logloss.append(val)
            if val < best_val:
                best_val = val
                best_len = len(model.trees)
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    break
    if valid is not None:
        del model.trees[best_len:]
        del model.shrinkage[best_len:]


def train_global(
    examples: ExampleSet,
    config: GbdtConfig | None = None,
    valid: ExampleSet | None = None,
) -> BoostedModel:
    """Pooled classifier over every index's embedding examples."""
    config = config or GbdtConfig()
    if len(examples) == 0:
        raise ValidationError("empty training set")
    p = float(np.mean(examples.y))
    if p <= 0.0 or p >= 1.0:
        raise ValidationError("training set must contain both classes")
    model = BoostedModel(
        trees=[],
        shrinkage=[],
        base_score=float(np.log(p / (1.0 - p))),
        config=config,
        n_features=examples.X.shape[1],
        stage="global",
        train_months=examples.month_range(),
        valid_months=valid.month_range() if valid is not None and len(valid)
        else None,
    )
    _boost(model, examples, valid, config.n_rounds, config.learning_rate,
           config)
    return model


def fine_tune(
    global_model: BoostedModel,
    target: ExampleSet,
    overrides: FineTuneOverrides | None = None,
    valid: ExampleSet | None = None,
) -> BoostedModel:
    """Continue boosting from the global ensemble on one index's sample."""
    overrides = overrides or FineTuneOverrides()
    if len(target) == 0:
        raise ValidationError("empty fine-tune set")
    if len(np.unique(target.y)) < 2:
        raise ValidationError("fine-tune set must contain both classes")
    lr = overrides.learning_rate
    if lr is None:
        lr = global_model.config.learning_rate / 2.0
    config = replace(
        global_model.config,
        learning_rate=lr,
        max_leaves=overrides.max_leaves,
        patience=overrides.patience,
        n_rounds=overrides.n_rounds,
    )
    model = BoostedModel(
        trees=list(global_model.trees),
        shrinkage=list(global_model.shrinkage),
        base_score=global_model.base_score,
        config=config,
        n_features=global_model.n_features,
        stage="fine-tune",
        n_pretrained=len(global_model.trees),
        train_months=target.month_range(),
        valid_months=valid.month_range() if valid is not None and len(valid)
        else None,
    )
    _boost(model, target, valid, overrides.n_rounds, lr, config)
    return model


def make_labels(series: PriceSeries, boundaries) -> list[tuple[int, int]]:
    """(month, next-month-up) pairs; the final boundary has no label.

    A flat month (exactly equal month-end levels) counts as not-up, which
    keeps the always-up industry benchmark well defined.
    """
    for b in boundaries:
        if b.position >= len(series):
            raise ValidationError(
                f"boundary {b.t} lies outside series '{series.index_id}'"
            )
    out = []
    for cur, nxt in zip(boundaries, boundaries[1:]):
        up = series.levels[nxt.position] > series.levels[cur.position]
        out.append((cur.t, int(up)))
    return out


def label_series(series: PriceSeries, window: int = 21) -> list[tuple[int, int]]:
    return make_labels(series, month_boundaries(series.dates, window))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: BoostedModel, path) -> None:
    doc = {
        "version": MODEL_VERSION,
        "stage": model.stage,
        "base_score": model.base_score,
        "n_features": model.n_features,
        "n_pretrained": model.n_pretrained,
        "shrinkage": model.shrinkage,
        "train_months": list(model.train_months) if model.train_months else None,
        "valid_months": list(model.valid_months) if model.valid_months else None,
        "config": {
            "learning_rate": model.config.learning_rate,
            "n_rounds": model.config.n_rounds,
            "max_leaves": model.config.max_leaves,
            "max_depth": model.config.max_depth,
            "max_bin": model.config.max_bin,
            "min_child_samples": model.config.min_child_samples,
            "reg_lambda": model.config.reg_lambda,
            "patience": model.config.patience,
        },
        "train_logloss": model.train_logloss,
        "valid_logloss": model.valid_logloss,
        "trees": [
            {
                "feature": tree.feature.tolist(),
                "threshold": [
                    None if np.isnan(t) else t for t in tree.threshold
                ],
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "value": tree.value.tolist(),
            }
            for tree in model.trees
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> BoostedModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    version = str(doc.get("version"))
    if version != MODEL_VERSION:
        raise ValidationError(
            f"model version '{version}' unsupported (expected "
            f"'{MODEL_VERSION}')"
        )
    trees = [
        Tree(
            feature=np.array(t["feature"], dtype=np.int32),
            threshold=np.array(
                [np.nan if x is None else x for x in t["threshold"]]
            ),
            left=np.array(t["left"], dtype=np.int32),
            right=np.array(t["right"], dtype=np.int32),
            value=np.array(t["value"]),
        )
        for t in doc["trees"]
    ]
    return BoostedModel(
        trees=trees,
        shrinkage=[float(s) for s in doc["shrinkage"]],
        base_score=float(doc["base_score"]),
        config=GbdtConfig(**doc["config"]),
        n_features=int(doc["n_features"]),
        stage=str(doc["stage"]),
        n_pretrained=int(doc.get("n_pretrained", 0)),
        train_months=tuple(doc["train_months"]) if doc.get("train_months")
        else None,
        valid_months=tuple(doc["valid_months"]) if doc.get("valid_months")
        else None,
        train_logloss=[float(x) for x in doc.get("train_logloss", [])],
        valid_logloss=[float(x) for x in doc.get("valid_logloss", [])],
    )
