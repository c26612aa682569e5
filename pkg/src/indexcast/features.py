"""Month-end node features: regime-conditioned similarity blocks over the graph.

For index i, node k and month-end t the feature vector is the concatenation

    [C1, C2, C3, C4, R, A]

where C1..C4 are per-day similarities (length w each) of the node's trailing
w-day driver window against the expanding statistics of clusters 1..4
(concluded bull / range / bear regimes, plus the full history), R holds the
index's trailing w daily simple returns, and A is the node's outgoing-edge
indicator (K flags). Total length 5*w + K; the first 5*w entries are
continuous, the last K discrete. Structured nodes use Mahalanobis distance,
unstructured (pre-embedded) nodes use cosine similarity against the cluster
mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DriverPanel, MonthBoundary, PriceSeries, align_panel, month_boundaries
from .errors import IndexcastError, NumericError, ValidationError
from .graph import STRUCTURED, UNSTRUCTURED, CausalGraph
from .regimes import ClusterAssignment, RegimeSegment, label_regimes

REG_EPS = 1e-3
STORE_VERSION = "1"


class EmptyClusterError(IndexcastError):
    """Signal: a cluster has no contributing days; caller falls back."""


@dataclass(frozen=True)
class ClusterStats:
    """Expanding mean/covariance of one node's drivers within one cluster."""

    mean: np.ndarray  # (n_k,)
    cov: np.ndarray  # (n_k, n_k), regularized positive definite
    count: int


def regularize_cov(cov: np.ndarray) -> np.ndarray:
    """Scale-aware ridge: S + eps * (trace(S)/n) * I.

    A zero-variance sample (single day, identical rows) has zero trace; the
    scale then falls back to 1 so the result stays positive definite.
    """
    n = cov.shape[0]
    trace = float(np.trace(cov))
    scale = trace / n if trace > 0.0 else 1.0
    return cov + REG_EPS * scale * np.eye(n)


def _mean_raw_cov(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    count, n = rows.shape
    mean = rows.mean(axis=0)
    if count > 1:
        centered = rows - mean
        cov = centered.T @ centered / (count - 1)
    else:
        cov = np.zeros((n, n))
    return mean, cov


def rolling_cluster_stats(
    values: np.ndarray,
    assignment: ClusterAssignment,
    boundary: MonthBoundary,
    cluster: int,
) -> ClusterStats:
    """Expanding statistics of ``values`` rows belonging to ``cluster`` at t.

    ``values`` rows correspond to the trading days of the assignment's series;
    only days at or before the boundary contribute, and clusters 1-3 restrict
    further to days whose regime had concluded by then.
    """
    if assignment.as_of != boundary.date:
        raise ValidationError(
            f"assignment as_of {assignment.as_of} does not match boundary "
            f"date {boundary.date}"
        )
    mask = assignment.members(cluster)
    rows = np.asarray(values, dtype=np.float64)[: len(mask)][mask]
    if len(rows) == 0:
        raise EmptyClusterError(
            f"cluster {cluster} has no contributing days at {boundary.t}"
        )
    mean, cov = _mean_raw_cov(rows)
    return ClusterStats(mean=mean, cov=regularize_cov(cov), count=len(rows))


def mahalanobis_block(window: np.ndarray, stats: ClusterStats) -> np.ndarray:
    """Per-day Mahalanobis distance of each window row from the cluster."""
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    diff = window - stats.mean
    cov = stats.cov
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        diag = np.diag(cov).copy()
        if np.any(diag <= 0.0):
            raise NumericError(
                "covariance not positive definite even after regularization"
            ) from None
        chol = np.diag(np.sqrt(diag))
    z = np.linalg.solve(chol, diff.T)
    return np.sqrt(np.sum(z * z, axis=0))


def cosine_block(window: np.ndarray, stats: ClusterStats) -> np.ndarray:
    """Cosine of the angle between each window row and the cluster mean.

    All-zero rows map to similarity 0; an all-zero mean is a numeric error.
    """
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    mu = stats.mean
    mu_norm = float(np.linalg.norm(mu))
    if mu_norm == 0.0:
        raise NumericError("cluster mean is identically zero")
    row_norms = np.linalg.norm(window, axis=1)
    out = np.zeros(len(window))
    nonzero = row_norms > 0.0
    out[nonzero] = (window[nonzero] @ mu) / (row_norms[nonzero] * mu_norm)
    return np.clip(out, -1.0, 1.0)


def returns_block(series: PriceSeries, boundary: MonthBoundary) -> np.ndarray:
    """Trailing w daily simple returns ending at the boundary."""
    w = boundary.window
    pos = boundary.position
    if pos < w:
        raise ValidationError(
            f"month {boundary.t}: need {w + 1} observations for returns, "
            f"have {pos + 1}"
        )
    levels = series.levels[pos - w : pos + 1]
    return levels[1:] / levels[:-1] - 1.0


@dataclass(frozen=True)
class NodeFeatures:
    """The assembled per-(t, i, k) attribute vector."""

    t: int  # yyyymm
    index_id: str
    node: int
    continuous: np.ndarray  # (5*w,) float64
    discrete: np.ndarray  # (K,) bool

    def vector(self) -> np.ndarray:
        return np.concatenate([self.continuous, self.discrete.astype(np.float64)])

    def __len__(self) -> int:
        return len(self.continuous) + len(self.discrete)


def _similarity(kind: str):
    return mahalanobis_block if kind == STRUCTURED else cosine_block


def assemble_features(
    series: PriceSeries,
    panel: DriverPanel,
    graph: CausalGraph,
    k: int,
    boundary: MonthBoundary,
    assignment: ClusterAssignment,
) -> NodeFeatures:
    """Assemble one node's feature vector at one month boundary.

    Clusters 1-3 with fewer than n_k + 2 contributing days fall back to the
    cluster-4 block so the vector stays well defined from the first month.
    """
    node = graph.nodes[k]
    cols = [panel.column(d) for d in node.driver_ids]
    aligned = align_panel(panel, series.dates)[:, cols]
    window = aligned[boundary.window_slice]
    sim = _similarity(node.kind)
    try:
        stats4 = rolling_cluster_stats(aligned, assignment, boundary, 4)
        block4 = sim(window, stats4)
        blocks = []
        for m in (1, 2, 3):
            try:
                stats_m = rolling_cluster_stats(aligned, assignment, boundary, m)
            except EmptyClusterError:
                blocks.append(block4)
                continue
            if stats_m.count < node.n_drivers + 2:
                blocks.append(block4)
            else:
                blocks.append(sim(window, stats_m))
    except NumericError as exc:
        raise NumericError(
            f"index '{series.index_id}' node '{node.name}' month "
            f"{boundary.t}: {exc}"
        ) from exc
    returns = returns_block(series, boundary)
    continuous = np.concatenate([*blocks, block4, returns])
    discrete = graph.adjacency_matrix()[k]
    return NodeFeatures(
        t=boundary.t,
        index_id=series.index_id,
        node=k,
        continuous=continuous,
        discrete=discrete,
    )


@dataclass
class FeatureStore:
    """Pooled feature matrix keyed by (month, index, node).

    Column order: 4 similarity blocks of w entries (clusters 1..4), then w
    trailing returns, then K adjacency flags as 0/1.
    """

    X: np.ndarray  # (n, 5*w + K) float64
    month: np.ndarray  # (n,) int64 yyyymm
    index_id: np.ndarray  # (n,) unicode
    node: np.ndarray  # (n,) int16
    window: int
    num_nodes: int

    @property
    def dim(self) -> int:
        return 5 * self.window + self.num_nodes

    @property
    def n_continuous(self) -> int:
        return 5 * self.window

    def __len__(self) -> int:
        return len(self.X)

    def select(
        self,
        months: tuple[int, int] | None = None,
        index_ids: tuple[str, ...] | None = None,
    ) -> "FeatureStore":
        mask = np.ones(len(self.X), dtype=bool)
        if months is not None:
            mask &= (self.month >= months[0]) & (self.month <= months[1])
        if index_ids is not None:
            mask &= np.isin(self.index_id, np.asarray(index_ids))
        return FeatureStore(
            X=self.X[mask], month=self.month[mask],
            index_id=self.index_id[mask], node=self.node[mask],
            window=self.window, num_nodes=self.num_nodes,
        )

    def save(self, path) -> None:
        np.savez_compressed(
            path, version=STORE_VERSION, X=self.X, month=self.month,
            index_id=self.index_id.astype("U"), node=self.node,
            window=self.window, num_nodes=self.num_nodes,
        )

    @classmethod
    def load(cls, path) -> "FeatureStore":
        with np.load(path, allow_pickle=False) as bundle:
            version = str(bundle["version"])
            if version != STORE_VERSION:
                raise ValidationError(
                    f"feature store version '{version}' unsupported "
                    f"(expected '{STORE_VERSION}')"
                )
            return cls(
                X=bundle["X"], month=bundle["month"],
                index_id=bundle["index_id"], node=bundle["node"],
                window=int(bundle["window"]), num_nodes=int(bundle["num_nodes"]),
            )


def _segment_day_arrays(
    segments: list[RegimeSegment], n_days: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-day regime kind and the position whose observation concluded it."""
    day_kind = np.zeros(n_days, dtype=np.int8)
    conclude_pos = np.full(n_days, n_days, dtype=np.int64)  # n_days = never
    for seg in segments:
        day_kind[seg.start_pos : seg.end_pos + 1] = int(seg.kind)
        if seg.concluded:
            conclude_pos[seg.start_pos : seg.end_pos + 1] = seg.decided_pos
    return day_kind, conclude_pos


def build_index_features(
    series: PriceSeries,
    panel: DriverPanel,
    graph: CausalGraph,
    threshold: float,
    window: int,
) -> FeatureStore:
    """All (t, k) feature vectors for one index.

    Equivalent to calling assemble_features per node and month but shares the
    regime segmentation, panel alignment, and cluster statistics across nodes.
    Boundaries without enough history for the returns block are skipped.
    """
    aligned = align_panel(panel, series.dates)
    segments = label_regimes(series, threshold)
    day_kind, conclude_pos = _segment_day_arrays(segments, len(series))
    boundaries = [
        b for b in month_boundaries(series.dates, window) if b.position >= window
    ]
    cols_per_node = [
        np.array([panel.column(d) for d in node.driver_ids])
        for node in graph.nodes
    ]
    adjacency = graph.adjacency_matrix().astype(np.float64)
    K = graph.num_nodes
    dim = 5 * window + K

    X = np.empty((len(boundaries) * K, dim))
    months = np.empty(len(X), dtype=np.int64)
    nodes_col = np.empty(len(X), dtype=np.int16)
    row = 0
    for boundary in boundaries:
        p = boundary.position
        window_full = aligned[boundary.window_slice]
        returns = returns_block(series, boundary)
        cluster_rows = {4: aligned[: p + 1]}
        for m in (1, 2, 3):
            mask = (day_kind == m) & (conclude_pos <= p)
            cluster_rows[m] = aligned[mask]
        moments = {
            m: _mean_raw_cov(rows) if len(rows) else None
            for m, rows in cluster_rows.items()
        }
        for k, node in enumerate(graph.nodes):
            cols = cols_per_node[k]
            idx = np.ix_(cols, cols)
            sim = _similarity(node.kind)
            win = window_full[:, cols]

            def node_block(m: int) -> np.ndarray:
                mean, cov = moments[m]
                stats = ClusterStats(
                    mean=mean[cols],
                    cov=regularize_cov(cov[idx]),
                    count=len(cluster_rows[m]),
                )
                return sim(win, stats)

            try:
                block4 = node_block(4)
                blocks = []
                for m in (1, 2, 3):
                    count = len(cluster_rows[m])
                    if moments[m] is None or count < node.n_drivers + 2:
                        blocks.append(block4)
                    else:
                        blocks.append(node_block(m))
            except NumericError as exc:
                raise NumericError(
                    f"index '{series.index_id}' node '{node.name}' month "
                    f"{boundary.t}: {exc}"
                ) from exc
            X[row, : 5 * window] = np.concatenate([*blocks, block4, returns])
            X[row, 5 * window :] = adjacency[k]
            months[row] = boundary.t
            nodes_col[row] = k
            row += 1

    return FeatureStore(
        X=X,
        month=months,
        index_id=np.full(len(X), series.index_id, dtype="U32"),
        node=nodes_col,
        window=window,
        num_nodes=K,
    )


def build_features(
    prices: list[PriceSeries],
    panel: DriverPanel,
    graph: CausalGraph,
    threshold: float,
    window: int,
) -> FeatureStore:
    """Pooled feature store over every index, in input order."""
    parts = [
        build_index_features(series, panel, graph, threshold, window)
        for series in prices
    ]
    return FeatureStore(
        X=np.concatenate([p.X for p in parts]),
        month=np.concatenate([p.month for p in parts]),
        index_id=np.concatenate([p.index_id for p in parts]),
        node=np.concatenate([p.node for p in parts]),
        window=window,
        num_nodes=graph.num_nodes,
    )
