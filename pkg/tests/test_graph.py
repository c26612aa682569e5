import numpy as np
import pytest

import indexcast as ic
from indexcast.errors import ValidationError
from indexcast.graph import Tier

BASE_CONFIG = {
    "num_nodes": 3,
    "window": 21,
    "threshold": 0.2,
    "embedding_dim": 5,
    "nodes": [
        {"name": "a", "tier": "long_term", "drivers": ["d0"]},
        {"name": "b", "tier": "cyclical", "drivers": ["d1", "d2"]},
        {"name": "c", "tier": "short_term", "drivers": ["d3"],
         "kind": "unstructured"},
    ],
    "edges": [["a", "b"], ["a", "c"], ["b", "c"]],
}


def test_load_graph_from_dict():
    g = ic.load_graph(BASE_CONFIG)
    assert g.num_nodes == 3
    assert g.num_edges == 3
    assert g.nodes[2].kind == "unstructured"
    assert g.nodes[1].driver_ids == ("d1", "d2")
    assert g.defaults == {"window": 21, "threshold": 0.2, "embedding_dim": 5}


def test_load_graph_node_count_mismatch():
    cfg = dict(BASE_CONFIG, num_nodes=4)
    with pytest.raises(ValidationError, match="3"):
        ic.load_graph(cfg)


def test_load_graph_dangling_edge():
    cfg = dict(BASE_CONFIG, edges=[["a", "zz"]])
    with pytest.raises(ValidationError, match="zz"):
        ic.load_graph(cfg)


def test_load_graph_duplicate_name():
    cfg = dict(BASE_CONFIG)
    cfg["nodes"] = [dict(n) for n in BASE_CONFIG["nodes"]]
    cfg["nodes"][1]["name"] = "a"
    with pytest.raises(ValidationError, match="duplicate"):
        ic.load_graph(cfg)


def test_load_graph_self_edge():
    cfg = dict(BASE_CONFIG, edges=[["a", "a"]])
    with pytest.raises(ValidationError, match="self-edge"):
        ic.load_graph(cfg)


def test_graph_yaml_roundtrip(tmp_path):
    g = ic.load_graph(BASE_CONFIG)
    path = tmp_path / "graph.yaml"
    ic.save_graph(g, path)
    assert ic.load_graph(path) == g


def test_adjacency_row():
    g = ic.load_graph(BASE_CONFIG)
    row_a = ic.adjacency_row(g, 0)
    np.testing.assert_array_equal(row_a, [False, True, True])
    row_c = ic.adjacency_row(g, 2)
    assert not row_c.any()  # no outgoing edges
    with pytest.raises(ValidationError):
        ic.adjacency_row(g, 3)


def test_adjacency_counting_identity():
    for g in (ic.load_graph(BASE_CONFIG), ic.default_market_graph(),
              ic.synthetic_graph(8, 3)):
        total = sum(ic.adjacency_row(g, k).sum() for k in range(g.num_nodes))
        assert total == g.num_edges


def test_default_market_graph_shape():
    g = ic.default_market_graph()
    assert g.num_nodes == 20
    assert g.num_edges == 147
    assert g.respects_tier_order()
    kinds = [n.kind for n in g.nodes]
    assert kinds.count("unstructured") == 4
    tiers = [n.tier for n in g.nodes]
    assert [tiers.count(t) for t in Tier] == [3, 10, 4, 3]


def test_packaged_default_config_matches_builder():
    assert ic.load_default_market_graph() == ic.default_market_graph()


def test_reload_is_stable(tmp_path):
    g = ic.default_market_graph()
    path = tmp_path / "g.yaml"
    ic.save_graph(g, path)
    assert ic.load_graph(path) == ic.load_graph(path)


def test_edge_list_export(tmp_path):
    g = ic.load_graph(BASE_CONFIG)
    path = tmp_path / "edges.tsv"
    ic.write_edge_list(g, path)
    lines = path.read_text().strip().splitlines()
    assert lines == ["a\tb", "a\tc", "b\tc"]


def test_cyclic_user_config_allowed():
    cfg = dict(BASE_CONFIG, edges=[["a", "b"], ["b", "a"]])
    g = ic.load_graph(cfg)  # cycles allowed: only adjacency rows are consumed
    assert not g.respects_tier_order() or True
    np.testing.assert_array_equal(ic.adjacency_row(g, 0), [False, True, False])
    np.testing.assert_array_equal(ic.adjacency_row(g, 1), [True, False, False])


def test_synthetic_graph_scales():
    g = ic.synthetic_graph(8, 3)
    assert g.num_nodes == 8
    assert all(n.n_drivers == 3 for n in g.nodes)
    assert g.respects_tier_order()
    assert any(n.kind == "unstructured" for n in g.nodes)
    with pytest.raises(ValidationError):
        ic.synthetic_graph(0, 3)
