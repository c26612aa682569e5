"""End-to-end orchestration: features -> shared VAE -> pooled GBDT -> fine-tune.

Stages operate on in-memory artifacts here; the CLI wraps each stage with
file IO so runs can be resumed and replayed. One VAE and one global
classifier are shared by every index; only fine-tuning is per target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backtest import SplitPlan
from .data import DriverPanel, PriceSeries, month_boundaries
from .errors import ValidationError
from .features import FeatureStore, build_features
from .gbdt import (
    BoostedModel,
    ExampleSet,
    FineTuneOverrides,
    GbdtConfig,
    fine_tune,
    make_labels,
    train_global,
)
from .graph import CausalGraph
from .vae import TrainReport, VaeConfig, VaeParams, embed_matrix, train_vae

EMBEDDING_STORE_VERSION = "1"


@dataclass
class PipelineConfig:
    threshold: float = 0.20  # regime threshold (lambda)
    window: int = 21  # trading days per month window (w)
    vae: VaeConfig = field(default_factory=VaeConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    fine_tune: FineTuneOverrides = field(default_factory=FineTuneOverrides)


@dataclass
class EmbeddingStore:
    """Concatenated per-node embeddings keyed by (month, index)."""

    X: np.ndarray  # (n, d * K) float64, node blocks in node-index order
    month: np.ndarray  # (n,) int64 yyyymm
    index_id: np.ndarray  # (n,) unicode
    d: int
    num_nodes: int

    def __len__(self) -> int:
        return len(self.X)

    def save(self, path) -> None:
        np.savez_compressed(
            path, version=EMBEDDING_STORE_VERSION, X=self.X, month=self.month,
            index_id=self.index_id.astype("U"), d=self.d,
            num_nodes=self.num_nodes,
        )

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with np.load(path, allow_pickle=False) as bundle:
            version = str(bundle["version"])
            if version != EMBEDDING_STORE_VERSION:
                raise ValidationError(
                    f"embedding store version '{version}' unsupported "
                    f"(expected '{EMBEDDING_STORE_VERSION}')"
                )
            return cls(
                X=bundle["X"], month=bundle["month"],
                index_id=bundle["index_id"], d=int(bundle["d"]),
                num_nodes=int(bundle["num_nodes"]),
            )


def embed_features(params: VaeParams, store: FeatureStore) -> EmbeddingStore:
    """Encode every stored feature row and pivot nodes into one row per (t, i).

    Every (month, index) pair must carry all K node vectors exactly once.
    """
    if len(store) == 0:
        raise ValidationError("no feature rows to embed")
    Z = embed_matrix(params, store.X)
    d = Z.shape[1]
    K = store.num_nodes
    order = np.lexsort((store.node, store.month, store.index_id))
    node_sorted = store.node[order]
    month_sorted = store.month[order]
    index_sorted = store.index_id[order]
    if len(order) % K != 0:
        raise ValidationError("feature rows do not tile into complete nodes")
    n_groups = len(order) // K
    expected = np.tile(np.arange(K), n_groups)
    if not np.array_equal(node_sorted, expected.astype(node_sorted.dtype)):
        raise ValidationError(
            "each (month, index) group must contain every node exactly once"
        )
    months = month_sorted[::K]
    ids = index_sorted[::K]
    if not (np.all(month_sorted.reshape(n_groups, K) == months[:, None])
            and np.all(index_sorted.reshape(n_groups, K) == ids[:, None])):
        raise ValidationError("node rows are misaligned across groups")
    X = Z[order].reshape(n_groups, K * d)
    return EmbeddingStore(X=X, month=months, index_id=ids, d=d, num_nodes=K)


def label_table(
    prices: list[PriceSeries], window: int
) -> dict[tuple[str, int], int]:
    """(index_id, month) -> next-month-up label for every labelable month."""
    out: dict[tuple[str, int], int] = {}
    for series in prices:
        boundaries = month_boundaries(series.dates, window)
        for t, y in make_labels(series, boundaries):
            out[(series.index_id, t)] = y
    return out


def build_examples(
    embeddings: EmbeddingStore,
    labels: dict[tuple[str, int], int],
) -> ExampleSet:
    """Join embeddings with next-month labels; unlabeled months drop out."""
    keep = []
    y = []
    for i in range(len(embeddings)):
        key = (str(embeddings.index_id[i]), int(embeddings.month[i]))
        if key in labels:
            keep.append(i)
            y.append(labels[key])
    if not keep:
        raise ValidationError("no embedding rows have matching labels")
    keep = np.array(keep)
    return ExampleSet(
        X=embeddings.X[keep],
        y=np.array(y, dtype=np.int64),
        month=embeddings.month[keep],
        index_id=embeddings.index_id[keep],
    )


@dataclass
class PipelineArtifacts:
    graph: CausalGraph
    plan: SplitPlan
    config: PipelineConfig
    features: FeatureStore
    vae_params: VaeParams
    vae_report: TrainReport
    embeddings: EmbeddingStore
    examples: ExampleSet
    global_model: BoostedModel
    target_models: dict[str, BoostedModel]


def run_pipeline(
    prices: list[PriceSeries],
    panel: DriverPanel,
    graph: CausalGraph,
    plan: SplitPlan,
    config: PipelineConfig,
    targets: tuple[str, ...],
) -> PipelineArtifacts:
    """Run every stage in protocol order on in-memory data."""
    known = {s.index_id for s in prices}
    missing = [t for t in targets if t not in known]
    if missing:
        raise ValidationError(f"unknown target indices: {missing}")

    features = build_features(prices, panel, graph, config.threshold,
                              config.window)

    vae_slice = features.select(months=plan.vae_train)
    if len(vae_slice) == 0:
        raise ValidationError("no feature rows fall inside the VAE train range")
    # one shared VAE across all indices and nodes: pool everything in range
    pooled_ids = set(np.unique(vae_slice.index_id))
    if pooled_ids != {s.index_id for s in prices}:
        raise ValidationError(
            "VAE training pool must cover every index; missing "
            f"{sorted(known - pooled_ids)}"
        )
    vae_params, vae_report = train_vae(
        vae_slice.X, features.n_continuous, config.vae,
        train_months=(int(vae_slice.month.min()), int(vae_slice.month.max())),
    )

    post = features.select(months=(plan.classifier_train[0], plan.test[1]))
    embeddings = embed_features(vae_params, post)
    labels = label_table(prices, config.window)
    examples = build_examples(embeddings, labels)

    train = examples.select_months(*plan.classifier_train)
    val = examples.select_months(*plan.validation)
    global_model = train_global(train, config.gbdt, val)

    target_models = {}
    for target in targets:
        t_train = _select_index(train, target)
        t_val = _select_index(val, target)
        target_models[target] = fine_tune(
            global_model, t_train, config.fine_tune, t_val
        )
    return PipelineArtifacts(
        graph=graph, plan=plan, config=config, features=features,
        vae_params=vae_params, vae_report=vae_report, embeddings=embeddings,
        examples=examples, global_model=global_model,
        target_models=target_models,
    )


def _select_index(examples: ExampleSet, index_id: str) -> ExampleSet:
    mask = examples.index_id == index_id
    return ExampleSet(
        X=examples.X[mask], y=examples.y[mask], month=examples.month[mask],
        index_id=examples.index_id[mask],
    )
