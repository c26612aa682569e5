"""A-priori causal graph: named latent-context nodes, directed edges, driver bindings.

The graph is config-driven. Node order is the config order and is the canonical
node index k used everywhere downstream. Only the per-node outgoing-edge
indicator row is consumed by the feature engine, so user-supplied configs may
contain cycles; the shipped default is acyclic by construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources

import numpy as np
import yaml

from .errors import ConfigError, ValidationError

DEFAULT_NUM_NODES = 20
DEFAULT_WINDOW = 21
DEFAULT_THRESHOLD = 0.20
DEFAULT_EMBEDDING_DIM = 5

STRUCTURED = "structured"
UNSTRUCTURED = "unstructured"


class Tier(enum.IntEnum):
    """Top-down hierarchy levels; lower value = longer horizon."""

    LONG_TERM = 0
    CYCLICAL = 1
    SHORT_TERM = 2
    VERY_SHORT_TERM = 3


_TIER_NAMES = {t.name.lower(): t for t in Tier}


@dataclass(frozen=True)
class NodeSpec:
    """One latent-context node and the raw drivers bound to it."""

    name: str
    tier: Tier
    driver_ids: tuple[str, ...]
    kind: str = STRUCTURED

    def __post_init__(self):
        if len(self.driver_ids) < 1:
            raise ValidationError(f"node '{self.name}' binds no drivers")
        if self.kind not in (STRUCTURED, UNSTRUCTURED):
            raise ValidationError(
                f"node '{self.name}' has unknown kind '{self.kind}'"
            )

    @property
    def n_drivers(self) -> int:
        return len(self.driver_ids)


@dataclass(frozen=True)
class CausalGraph:
    """Validated graph of K nodes plus directed edges between them.

    ``defaults`` carries the window/threshold/embedding-dim values declared in
    the node-config file (w, lambda, d).
    """

    nodes: tuple[NodeSpec, ...]
    edges: tuple[tuple[str, str], ...]
    defaults: dict

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        seen = set()
        for name in names:
            if name in seen:
                raise ValidationError(f"duplicate node name '{name}'")
            seen.add(name)
        for src, dst in self.edges:
            if src == dst:
                raise ValidationError(f"self-edge on node '{src}'")
            for endpoint in (src, dst):
                if endpoint not in seen:
                    raise ValidationError(
                        f"edge references undeclared node '{endpoint}'"
                    )
        if len(set(self.edges)) != len(self.edges):
            raise ValidationError("duplicate edge in edge list")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def node_index(self, name: str) -> int:
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise ValidationError(f"unknown node '{name}'")

    def adjacency_matrix(self) -> np.ndarray:
        """Boolean K x K matrix; entry [k, j] marks an edge k -> j."""
        index = {n.name: i for i, n in enumerate(self.nodes)}
        mat = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for src, dst in self.edges:
            mat[index[src], index[dst]] = True
        return mat

    def respects_tier_order(self) -> bool:
        index = {n.name: i for i, n in enumerate(self.nodes)}
        return all(
            self.nodes[index[src]].tier <= self.nodes[index[dst]].tier
            for src, dst in self.edges
        )

    def referenced_driver_ids(self) -> tuple[str, ...]:
        out: list[str] = []
        seen: set[str] = set()
        for node in self.nodes:
            for did in node.driver_ids:
                if did not in seen:
                    seen.add(did)
                    out.append(did)
        return tuple(out)


def adjacency_row(graph: CausalGraph, k: int) -> np.ndarray:
    """Outgoing-edge indicator of node k: boolean vector of length K."""
    if not 0 <= k < graph.num_nodes:
        raise ValidationError(
            f"node index {k} out of range for {graph.num_nodes}-node graph"
        )
    return graph.adjacency_matrix()[k]


def load_graph(source, expected_nodes: int | None = None) -> CausalGraph:
    """Parse a node-config file (or pre-parsed dict) into a CausalGraph.

    The expected node count comes from ``expected_nodes``, falling back to the
    file's own ``num_nodes`` key, then to 20. The edge list may be empty but
    every endpoint must be a declared node.
    """
    if isinstance(source, dict):
        raw = source
    else:
        with open(source, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    if not isinstance(raw, dict) or "nodes" not in raw:
        raise ConfigError("node-config must be a mapping with a 'nodes' list")

    expected = expected_nodes
    if expected is None:
        expected = int(raw.get("num_nodes", DEFAULT_NUM_NODES))

    nodes = []
    for entry in raw["nodes"]:
        try:
            tier = _TIER_NAMES[str(entry["tier"]).lower()]
        except KeyError:
            raise ConfigError(
                f"node '{entry.get('name', '?')}' has unknown tier "
                f"'{entry.get('tier')}'"
            ) from None
        nodes.append(
            NodeSpec(
                name=str(entry["name"]),
                tier=tier,
                driver_ids=tuple(str(d) for d in entry.get("drivers", [])),
                kind=str(entry.get("kind", STRUCTURED)),
            )
        )
    if len(nodes) != expected:
        raise ValidationError(
            f"node-config declares {len(nodes)} nodes, expected {expected}"
        )

    edges = tuple(
        (str(e[0]), str(e[1])) for e in raw.get("edges", [])
    )
    defaults = {
        "window": int(raw.get("window", DEFAULT_WINDOW)),
        "threshold": float(raw.get("threshold", DEFAULT_THRESHOLD)),
        "embedding_dim": int(raw.get("embedding_dim", DEFAULT_EMBEDDING_DIM)),
    }
    return CausalGraph(nodes=tuple(nodes), edges=edges, defaults=defaults)


def save_graph(graph: CausalGraph, path) -> None:
    """Write a graph back out in the node-config grammar."""
    doc = {
        "num_nodes": graph.num_nodes,
        "window": graph.defaults.get("window", DEFAULT_WINDOW),
        "threshold": graph.defaults.get("threshold", DEFAULT_THRESHOLD),
        "embedding_dim": graph.defaults.get(
            "embedding_dim", DEFAULT_EMBEDDING_DIM
        ),
        "nodes": [
            {
                "name": n.name,
                "tier": n.tier.name.lower(),
                "kind": n.kind,
                "drivers": list(n.driver_ids),
            }
            for n in graph.nodes
        ],
        "edges": [[src, dst] for src, dst in graph.edges],
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def write_edge_list(graph: CausalGraph, path) -> None:
    """Export edges as tab-separated 'src<TAB>dst' lines for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        for src, dst in graph.edges:
            fh.write(f"{src}\t{dst}\n")


def _tier_counts(n_nodes: int) -> list[int]:
    # 3/10/4/3 proportions of the 20-node default, scaled and rounded with
    # remainders going to the largest fractional parts.
    fractions = (0.15, 0.50, 0.20, 0.15)
    raw = [f * n_nodes for f in fractions]
    counts = [int(r) for r in raw]
    remainders = sorted(
        range(4), key=lambda i: (raw[i] - counts[i], -i), reverse=True
    )
    for i in range(n_nodes - sum(counts)):
        counts[remainders[i % 4]] += 1
    return counts


def _tiered_edges(names: list[str], tiers: list[Tier]) -> list[tuple[str, str]]:
    """Dense top-down edge policy.

    Every node points at every node of a strictly later tier, and each tier
    except the first carries a declaration-order chain. On the 20-node default
    layout this yields exactly 147 edges.
    """
    edges = []
    for i, src in enumerate(names):
        for j, dst in enumerate(names):
            if tiers[i] < tiers[j]:
                edges.append((src, dst))
    for tier in (Tier.CYCLICAL, Tier.SHORT_TERM, Tier.VERY_SHORT_TERM):
        members = [n for n, t in zip(names, tiers) if t == tier]
        for a, b in zip(members, members[1:]):
            edges.append((a, b))
    return edges


def synthetic_node_name(k: int) -> str:
    return f"node{k:02d}"


def synthetic_driver_id(k: int, j: int) -> str:
    return f"node{k:02d}_d{j}"


def synthetic_graph(
    n_nodes: int,
    n_drivers_per_node: int,
    unstructured_every: int = 5,
    window: int = DEFAULT_WINDOW,
    threshold: float = DEFAULT_THRESHOLD,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
) -> CausalGraph:
    """Desk-scale graph whose driver ids match the synthetic generator."""
    if n_nodes < 1 or n_drivers_per_node < 1:
        raise ValidationError("n_nodes and n_drivers_per_node must be positive")
    counts = _tier_counts(n_nodes)
    tiers: list[Tier] = []
    for tier, count in zip(Tier, counts):
        tiers.extend([tier] * count)
    names = [synthetic_node_name(k) for k in range(n_nodes)]
    nodes = tuple(
        NodeSpec(
            name=names[k],
            tier=tiers[k],
            driver_ids=tuple(
                synthetic_driver_id(k, j) for j in range(n_drivers_per_node)
            ),
            kind=UNSTRUCTURED
            if unstructured_every and (k % unstructured_every == unstructured_every - 1)
            else STRUCTURED,
        )
        for k in range(n_nodes)
    )
    edges = tuple(_tiered_edges(names, tiers))
    defaults = {
        "window": window,
        "threshold": threshold,
        "embedding_dim": embedding_dim,
    }
    return CausalGraph(nodes=nodes, edges=edges, defaults=defaults)


# Node names and raw-driver bindings of the shipped 20-node market graph.
# The driver ids are the documented default binding; real deployments remap
# them in their own node-config.
_MARKET_NODES: list[tuple[str, Tier, str, list[str]]] = [
    ("productivity", Tier.LONG_TERM, STRUCTURED,
     ["total_labor_productivity", "output_per_hour_business",
      "output_per_hour_nonfinancial", "output_per_hour_nonfarm"]),
    ("long_term_debt", Tier.LONG_TERM, STRUCTURED,
     ["lt_debt_government", "lt_debt_nonprofit", "lt_debt_private",
      "lt_debt_investment_funds", "lt_debt_pension_funds",
      "lt_debt_monetary_authority", "lt_debt_insurance",
      "lt_debt_local_government", "lt_debt_other"]),
    ("short_term_debt", Tier.LONG_TERM, STRUCTURED,
     ["st_debt_government", "st_debt_nonprofit", "st_debt_private",
      "st_debt_investment_funds", "st_debt_pension_funds",
      "st_debt_monetary_authority", "st_debt_insurance",
      "st_debt_local_government", "st_debt_other"]),
    ("monetary_cycle", Tier.CYCLICAL, STRUCTURED,
     ["m1", "m2", "fed_funds", "mzm_money_stock", "bank_prime_loan_rate",
      "tbill_3m", "tbill_6m", "tbill_12m", "personal_loan_rate_24m",
      "consumer_loan_rate"]),
    ("rate_term_structure", Tier.CYCLICAL, STRUCTURED,
     ["fed_funds", "tbill_3m", "tbill_6m", "tbill_12m", "tcm_1y", "tcm_3y",
      "tcm_5y", "tcm_7y", "tcm_10y", "aaa_corporate_yield",
      "baa_corporate_yield", "mortgage_30y_rate"]),
    ("eco_business_cycle", Tier.CYCLICAL, STRUCTURED,
     ["industrial_production", "inflation"]),
    ("market_business_cycle", Tier.CYCLICAL, STRUCTURED,
     ["premium_equity", "premium_cyclical", "premium_value", "premium_term",
      "premium_credit", "premium_carry", "premium_safe_haven"]),
    ("household_solvency", Tier.CYCLICAL, STRUCTURED,
     ["net_worth", "disposable_income", "owners_equity_real_estate",
      "consumer_credit", "residential_mortgage", "total_liability",
      "commercial_mortgage_liability", "other_loans"]),
    ("valuation_regime", Tier.CYCLICAL, STRUCTURED,
     ["price_earnings_1y", "price_earnings_3y", "price_earnings_5y",
      "price_earnings_10y"]),
    ("monetary_policy_text", Tier.CYCLICAL, UNSTRUCTURED,
     [f"fomc_embedding_{i}" for i in range(25)]),
    ("business_cycle_text", Tier.CYCLICAL, UNSTRUCTURED,
     [f"beige_book_embedding_{i}" for i in range(25)]),
    ("recession_fed_text", Tier.CYCLICAL, UNSTRUCTURED,
     [f"recession_fed_embedding_{i}" for i in range(25)]),
    ("recession_business_text", Tier.CYCLICAL, UNSTRUCTURED,
     [f"recession_business_embedding_{i}" for i in range(25)]),
    ("co_movement", Tier.SHORT_TERM, STRUCTURED,
     [f"xasset_return_{i}" for i in range(70)]),
    ("co_volatility", Tier.SHORT_TERM, STRUCTURED,
     [f"xasset_volatility_{i}" for i in range(70)]),
    ("co_skew", Tier.SHORT_TERM, STRUCTURED,
     [f"xasset_skew_{i}" for i in range(70)]),
    ("co_kurtosis", Tier.SHORT_TERM, STRUCTURED,
     [f"xasset_kurtosis_{i}" for i in range(70)]),
    ("momentum_return", Tier.VERY_SHORT_TERM, STRUCTURED,
     ["return_1m", "return_3m", "return_6m", "return_12m"]),
    ("momentum_volatility", Tier.VERY_SHORT_TERM, STRUCTURED,
     ["volatility_1m", "volatility_3m", "volatility_6m", "volatility_12m"]),
    ("risk_aversion", Tier.VERY_SHORT_TERM, STRUCTURED,
     ["rp_equity_minus_rf", "rp_sector_minus_rf", "rp_smb", "rp_hml",
      "rp_momentum"]),
]


def default_market_graph() -> CausalGraph:
    """The shipped 20-node graph; 147 edges under the dense top-down policy."""
    names = [name for name, _, _, _ in _MARKET_NODES]
    tiers = [tier for _, tier, _, _ in _MARKET_NODES]
    nodes = tuple(
        NodeSpec(name=name, tier=tier, driver_ids=tuple(drivers), kind=kind)
        for name, tier, kind, drivers in _MARKET_NODES
    )
    return CausalGraph(
        nodes=nodes,
        edges=tuple(_tiered_edges(names, tiers)),
        defaults={
            "window": DEFAULT_WINDOW,
            "threshold": DEFAULT_THRESHOLD,
            "embedding_dim": DEFAULT_EMBEDDING_DIM,
        },
    )


def load_default_market_graph() -> CausalGraph:
    """Load the packaged default node-config file."""
    ref = resources.files("indexcast.configs").joinpath("default_graph.yaml")
    with resources.as_file(ref) as path:
        return load_graph(path)
