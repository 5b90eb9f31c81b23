import logging
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalnets import graphs
from causalnets.detectors import LagCalibration
from causalnets.graphs import (
    CausalGraph,
    DirectedEdge,
    Node,
    SynthesisConfig,
    UndirectedEdge,
    build_correlation_reference,
    compare_to_reference,
    edge_color,
    prepare_input,
    refine_directed,
    synth_undirected,
    to_dot,
)

import oracles


def _ratios(n, seed=0, length=101):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(4, length))
    out = {}
    for i in range(n):
        mix = rng.normal(size=4)
        out[f"G{i:03d}"] = SimpleNamespace(values=mix @ base + 0.3 * rng.normal(size=length))
    return out


class CorrStub:
    """Probability from absolute correlation of the prepared windows."""

    def pairwise_probability(self, x):
        return 0.5 + 0.5 * np.abs(np.corrcoef(x))


class LagStub:
    """Lag score from the difference of first window values, antisymmetric by construction."""

    def predict(self, a, b):
        return np.tanh(np.asarray(a)[:, 0] - np.asarray(b)[:, 0])


def _oracle_prob(ratios):
    def prob(a, b):
        x = prepare_input(ratios[a])
        y = prepare_input(ratios[b])
        r = float(np.sum((x - x.mean()) * (y - y.mean())) / np.sqrt(np.sum((x - x.mean()) ** 2) * np.sum((y - y.mean()) ** 2)))
        return 0.5 + 0.5 * abs(r)
    return prob


def test_window_bounds_centered():
    assert graphs.window_bounds(101, 80, "centered") == (10, 90)
    assert graphs.window_bounds(101, 80, "leading") == (0, 80)
    assert graphs.window_bounds(101, 80, "trailing") == (21, 101)


def test_prepare_input_standardizes_full_series_first():
    v = np.arange(101.0)
    x = prepare_input(v)
    z = (v - v.mean()) / v.std()
    assert np.array_equal(x, z[10:90])


def test_prepare_input_constant_is_excluded(caplog):
    with caplog.at_level(logging.WARNING):
        assert prepare_input(np.ones(101)) is None
    assert "zero variance" in caplog.text


def test_config_validation():
    for bad in ({"probability_cutoff": 0.5}, {"probability_cutoff": 1.0}, {"lag_threshold": 0.0},
                {"window_policy": "middle"}):
        with pytest.raises(ValueError):
            SynthesisConfig(**bad)


def test_undirected_matches_brute_force_filter():
    ratios = _ratios(200)
    cfg = SynthesisConfig(sorted(ratios), probability_cutoff=0.8)
    g = synth_undirected(CorrStub(), ratios, cfg)
    g.validate()
    expected = oracles.brute_force_filter(list(ratios), _oracle_prob(ratios), 0.8)
    got = {(e.a, e.b) for e in g.undirected_edges}
    prob = _oracle_prob(ratios)
    # pairs within rounding of the cutoff may fall either way
    diff = got ^ expected
    assert all(abs(prob(a, b) - 0.8) < 1e-9 for a, b in diff)
    assert len(got) > 0
    assert g.node_ids() == {x for p in got for x in p}


@settings(max_examples=10, deadline=None)
@given(st.permutations(list(range(25))))
def test_subset_order_does_not_matter(perm):
    ratios = _ratios(25, seed=1)
    ids = sorted(ratios)
    a = synth_undirected(CorrStub(), ratios, SynthesisConfig(ids))
    b = synth_undirected(CorrStub(), ratios, SynthesisConfig([ids[i] for i in perm]))
    assert a.to_dict() == b.to_dict()


def test_empty_and_single_subset():
    ratios = _ratios(3)
    assert synth_undirected(CorrStub(), ratios, SynthesisConfig([])).n_edges() == 0
    assert synth_undirected(CorrStub(), ratios, SynthesisConfig(["G000"])).nodes == []


def test_regulation_sign():
    assert graphs.regulation_of([0.0, 0.0]) == "up"
    assert graphs.regulation_of([-1.0, 0.5]) == "down"


def _undirected_graph():
    ratios = _ratios(30, seed=2)
    cfg = SynthesisConfig(sorted(ratios), probability_cutoff=0.75, lag_threshold=0.1)
    return ratios, cfg, synth_undirected(CorrStub(), ratios, cfg)


def test_direction_rule_and_count_preserved():
    ratios, cfg, g = _undirected_graph()
    cal = [LagCalibration(0.1, 0.8, 0.5)]
    r = refine_directed(g, LagStub(), ratios, cfg, cal)
    r.validate()
    assert r.n_edges() == g.n_edges() and r.edge_pairs() == g.edge_pairs()
    lag = LagStub()
    for e in r.directed_edges:
        s = float(lag.predict(prepare_input(ratios[e.source])[None], prepare_input(ratios[e.target])[None])[0])
        assert s >= 0.1
        assert e.probability == pytest.approx(e.causal_probability * 0.8)
        assert e.direction_probability == 0.8
    for e in r.undirected_edges:
        s = float(lag.predict(prepare_input(ratios[e.a])[None], prepare_input(ratios[e.b])[None])[0])
        assert abs(s) < 0.1
    assert r.directed_edges and r.undirected_edges


def test_direction_independent_of_stored_orientation():
    ratios, cfg, g = _undirected_graph()
    flipped = CausalGraph(g.nodes, [UndirectedEdge(e.b, e.a, e.probability) for e in g.undirected_edges], [],
                          g.metadata)
    a = refine_directed(g, LagStub(), ratios, cfg)
    b = refine_directed(flipped, LagStub(), ratios, cfg)
    assert a.to_dict() == b.to_dict()


def test_precision_interpolated_with_warning(caplog):
    cal = [LagCalibration(0.01, 0.6, 0.9), LagCalibration(0.05, 0.8, 0.5)]
    with caplog.at_level(logging.WARNING):
        p = graphs.direction_precision(cal, 0.025)
    assert p == pytest.approx(0.675)
    assert "interpolating" in caplog.text
    assert graphs.direction_precision(cal, 0.05) == 0.8
    assert graphs.direction_precision([], 0.05) is None


def test_edge_colors():
    assert edge_color(1.0) == "#000000"
    assert edge_color(0.7) == "#c0c0c0"
    assert edge_color(None) == "#808080"
    levels = [int(edge_color(p)[1:3], 16) for p in np.linspace(0.7, 1.0, 31)]
    assert all(a >= b for a, b in zip(levels, levels[1:]))


def test_dot_empty_graph():
    text = to_dot(CausalGraph())
    assert text.startswith("digraph causal {") and text.rstrip().endswith("}")


def test_dot_content_and_determinism():
    g = CausalGraph([Node("B", "down"), Node("A", "up"), Node("C", "up")],
                    [UndirectedEdge("A", "B", 0.9)], [DirectedEdge("C", "A", 0.75)])
    text = to_dot(g)
    assert '"A" [fillcolor="#33a02c"]' in text and '"B" [fillcolor="#e31a1c"]' in text
    assert '"A" -> "B" [dir=none' in text and '"C" -> "A" [color=' in text
    shuffled = CausalGraph(g.nodes[::-1], g.undirected_edges, g.directed_edges)
    assert to_dot(shuffled) == text


def test_json_round_trip(tmp_path):
    ratios, cfg, g = _undirected_graph()
    r = refine_directed(g, LagStub(), ratios, cfg, [LagCalibration(0.1, 0.9, 0.3)])
    graphs.export_json(r, tmp_path / "g.json")
    back = graphs.import_json(tmp_path / "g.json")
    assert back.to_dict() == r.to_dict()
    assert '"from"' in (tmp_path / "g.json").read_text()


def test_validate_rejects_bad_graphs():
    with pytest.raises(ValueError):
        CausalGraph([Node("A"), Node("B")], [UndirectedEdge("B", "A")]).validate()
    with pytest.raises(ValueError):
        CausalGraph([Node("A")], [], [DirectedEdge("A", "A")]).validate()
    with pytest.raises(ValueError):
        CausalGraph([Node("A"), Node("B")], [UndirectedEdge("A", "B")], [DirectedEdge("B", "A")]).validate()
    with pytest.raises(ValueError):
        CausalGraph([Node("A"), Node("B")], [UndirectedEdge("A", "B", 1.5)]).validate()


def _brute_reference(ids, x, threshold):
    edges = set()
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if np.std(x[i]) == 0 or np.std(x[j]) == 0:
                continue
            if np.corrcoef(x[i], x[j])[0, 1] >= threshold:
                edges.add(tuple(sorted((ids[i], ids[j]))))
    return edges


def test_correlation_reference_matches_brute_force():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(120, 40))
    x[7] = x[3]
    x[9] = 4.0
    ids = [f"P{i:03d}" for i in range(120)]
    ref = build_correlation_reference(ids, x, 0.075, block=17)
    assert ("P003", "P007") in ref.edges
    assert "P009" not in ref.nodes
    assert ref.edges == _brute_reference(ids, x, 0.075)
    assert ref.edges == build_correlation_reference(ids, x, 0.075, block=1024).edges


def test_correlation_null_rate_matches_permutation_oracle():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(150, 30))
    ref = build_correlation_reference([str(i) for i in range(150)], x, 0.075)
    rate = len(ref.edges) / (150 * 149 / 2)
    # null rate estimated by permuting columns independently per row
    hits = 0
    trials = 20_000
    for _ in range(trials):
        a = rng.permutation(x[rng.integers(150)])
        b = x[rng.integers(150)]
        hits += np.corrcoef(a, b)[0, 1] >= 0.075
    assert abs(rate - hits / trials) < 0.03


def test_correlation_reference_needs_columns():
    with pytest.raises(ValueError):
        build_correlation_reference(["a", "b"], np.ones((2, 2)))


def test_compare_to_reference():
    g = CausalGraph([Node(x) for x in "ABCD"], [UndirectedEdge("A", "B"), UndirectedEdge("C", "D")],
                    [DirectedEdge("B", "A")])
    ref = graphs.ReferenceGraph({"A", "B", "C"}, {("A", "B")})
    assert compare_to_reference(g, ref) == {"restricted_edges": 1, "overlap": 1, "accuracy": 1.0}
    assert compare_to_reference(CausalGraph(), ref)["accuracy"] is None


def test_load_profiles(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("id,a,b,c\nX,1,2,3\nY,3,2,1\n")
    ids, m = graphs.load_profiles(p)
    assert ids == ["X", "Y"] and m.shape == (2, 3)
    p.write_text("id,a,b,c\nX,1,zz,3\n")
    with pytest.raises(ValueError, match=":2:"):
        graphs.load_profiles(p)
