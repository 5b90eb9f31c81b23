import csv
import logging
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalnets import autoenc
from causalnets.autoenc import (
    ModelScore,
    Occurrences,
    autoencoder_architecture,
    consistency,
    critical_distances,
    extract_occurrences,
    lift_to_genes,
    match_occurrences,
    rank_models,
    solve_threshold,
    supported_pair_count,
    train_autoencoders,
    witness_tally,
)
from causalnets.nn import forward, init_weights

import oracles


def _random_occurrences(seed, n_genes=6, per_gene=12, dim=3, times=8):
    rng = np.random.default_rng(seed)
    n = n_genes * per_gene
    return Occurrences(rng.normal(size=(n, dim)), [f"g{i}" for i in range(n_genes)],
                       np.repeat(np.arange(n_genes), per_gene), rng.integers(0, times, n))


def _series(n, seed=0, length=101):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, length)
    out = {}
    for i in range(n):
        v = np.sin(2 * np.pi * (rng.uniform(0.5, 2) * t + rng.uniform())) + 0.05 * rng.normal(size=length)
        out[f"G{i:02d}"] = SimpleNamespace(values=(v - v.mean()) / v.std())
    return out


@pytest.mark.parametrize("window", [31, 41, 51, 61])
def test_reconstruction_has_input_length(window):
    w = init_weights(autoencoder_architecture(101, window, 10))
    out, _ = forward(w, np.zeros((2, 101, 1)))
    assert out.shape == (2, 101, 1)


def test_zero_weights_reconstruct_zero_series_exactly():
    w = init_weights(autoencoder_architecture(101, 41, 4))
    for k in w.tensors:
        w.tensors[k][...] = 0.0
    assert autoenc._mse(w, np.zeros((3, 101))) == 0.0


def test_training_beats_zero_predictor_and_needs_twenty():
    series = _series(24)
    [m] = train_autoencoders(series, windows=(31,), feature_dims=(6,), max_epochs=40, seed=1)
    x = np.array([s.values for s in series.values()])
    _, va = autoenc.split_indices(24, 1)
    assert m.error is None and m.val_mse <= float(np.mean(x[va] ** 2))
    with pytest.raises(ValueError):
        train_autoencoders(_series(19), windows=(31,))


def test_split_sizes():
    tr, va = autoenc.split_indices(50, 0)
    assert len(tr) == 45 and len(va) == 5 and not set(tr) & set(va)


def test_divergence_is_reported_not_raised(monkeypatch):
    def boom(*a, **k):
        raise autoenc.AutoencoderDivergence("loss not finite")
    monkeypatch.setattr(autoenc, "fit_autoencoder", boom)
    [m] = train_autoencoders(_series(20), windows=(31,))
    assert m.error and m.weights is None


@pytest.mark.parametrize("window,genes,expected", [(41, 1, 61), (61, 10, 410)])
def test_occurrence_counts(window, genes, expected):
    w = init_weights(autoencoder_architecture(101, window, 5), seed=0)
    occ = extract_occurrences(w, _series(genes), cap=None)
    assert len(occ) == expected
    assert occ.time_index.min() == window // 2
    assert occ.features.shape[1] == 5


def test_occurrence_cap_subsamples_deterministically():
    w = init_weights(autoencoder_architecture(101, 41, 5), seed=0)
    a = extract_occurrences(w, _series(10), cap=100, seed=3)
    b = extract_occurrences(w, _series(10), cap=100, seed=3)
    assert len(a) == 100 and np.array_equal(a.features, b.features)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 2.5))
def test_matching_agrees_with_brute_force(seed, r):
    occ = _random_occurrences(seed)
    w = match_occurrences(occ, r)
    got = set(zip(w.src.tolist(), w.dst.tolist(), w.directed.tolist()))
    expected = oracles.brute_force_matches(occ.features, occ.gene_index, occ.time_index, r)
    assert got == expected


def test_zero_threshold_matches_only_identical_features():
    occ = _random_occurrences(0)
    occ.features[5] = occ.features[40]
    w = match_occurrences(occ, 0.0)
    assert len(w) == 1
    assert len(match_occurrences(_random_occurrences(1), 0.0)) == 0


def test_matching_invariant_under_reordering():
    occ = _random_occurrences(2)
    perm = np.random.default_rng(0).permutation(len(occ))
    shuffled = Occurrences(occ.features[perm], occ.genes, occ.gene_index[perm], occ.time_index[perm])
    assert witness_tally(match_occurrences(occ, 1.2)) == witness_tally(match_occurrences(shuffled, 1.2))


@pytest.mark.parametrize("n", [1, 2, 3, 5, 10])
def test_lift_agrees_with_brute_force(n):
    occ = _random_occurrences(n, n_genes=5, per_gene=20, times=4)
    w = match_occurrences(occ, 1.5)
    lifted = lift_to_genes(w, n)
    names = [occ.genes[g] for g in occ.gene_index]
    matches = oracles.brute_force_matches(occ.features, occ.gene_index, occ.time_index, 1.5)
    directed, undirected = oracles.brute_force_lift(matches, names, n)
    assert set(lifted.directed) == directed
    assert set(lifted.undirected) == undirected


def _witnesses_from(rows):
    """Build witnesses directly from (gene_a, time_a, gene_b, time_b) rows."""
    feats, genes, times = [], [], []
    for ga, ta, gb, tb in rows:
        genes += [ga, gb]
        times += [ta, tb]
    occ = Occurrences(np.zeros((len(genes), 1)), ["a", "b", "c"], np.array(genes), np.array(times))
    idx = np.arange(0, len(genes), 2)
    return autoenc._orient(occ, idx, idx + 1)


def test_pruning_of_contradictions():
    # a->b three times and b->a three times: both pruned at n=2
    rows = [(0, 0, 1, 1)] * 3 + [(1, 0, 0, 1)] * 3 + [(0, 0, 2, 3)] * 2 + [(1, 2, 2, 2)] * 2
    lifted = lift_to_genes(_witnesses_from(rows), 2)
    assert lifted.pruned == {("a", "b"), ("b", "a")}
    assert lifted.directed == {("a", "c"): 2}
    assert lifted.undirected == {("b", "c"): 2}


def test_directed_and_undirected_same_pair_pruned():
    rows = [(0, 0, 1, 1)] * 2 + [(0, 3, 1, 3)] * 2
    lifted = lift_to_genes(_witnesses_from(rows), 2)
    assert lifted.directed == {} and lifted.undirected == {("a", "b"): 2}


def test_consistency_values():
    assert consistency(_witnesses_from([(0, 0, 1, 1)] * 4)) == 1.0
    assert consistency(_witnesses_from([(0, 0, 1, 1)] * 3 + [(1, 0, 0, 1)])) == pytest.approx(0.75)
    assert consistency(_witnesses_from([(0, 0, 1, 1)] * 2 + [(1, 0, 0, 1)] * 2)) == pytest.approx(0.5)
    assert consistency(_witnesses_from([])) == 1.0


def _supported(witnesses, n):
    d, u = witness_tally(witnesses)
    pairs = {k for k, c in u.items() if c >= n}
    pairs |= {tuple(sorted(k)) for k, c in d.items() if c >= n}
    return pairs


@pytest.mark.parametrize("n", [1, 3])
def test_critical_distances_agree_with_matching(n):
    occ = _random_occurrences(7, n_genes=7, per_gene=10)
    crit = critical_distances(occ, n)
    for r in (0.3, 0.8, 1.4, 2.5):
        assert supported_pair_count(crit, r) == len(_supported(match_occurrences(occ, r), n))


def test_solve_threshold_reaches_target_minimally():
    occ = _random_occurrences(8, n_genes=8, per_gene=10)
    prev = 0.0
    for target in (1, 5, 10, 20):
        r = solve_threshold(occ, 2, target)
        assert len(_supported(match_occurrences(occ, r), 2)) >= target
        assert len(_supported(match_occurrences(occ, r * (1 - 1e-5)), 2)) < target
        assert r >= prev
        prev = r


def test_unreachable_target_warns(caplog):
    occ = _random_occurrences(9, n_genes=3)
    with caplog.at_level(logging.WARNING):
        r = solve_threshold(occ, 1, 10)
    assert "unreachable" in caplog.text
    assert r == pytest.approx(np.linalg.norm(occ.features.max(0) - occ.features.min(0)))


def test_ranking_rule_and_top_per_window():
    scores = [ModelScore(41, 10, 1, 0.2, 0.9), ModelScore(41, 10, 2, 0.1, 0.9), ModelScore(41, 10, 3, 0.1, 0.8),
              ModelScore(41, 10, 5, 0.3, 0.7), ModelScore(31, 10, 1, 0.5, 0.95)]
    ranked = rank_models(scores, top=3)
    assert [(s.window, s.n) for s in ranked] == [(31, 1), (41, 2), (41, 1), (41, 3), (41, 5)]
    assert [s.rank for s in ranked] == [1, 2, 3, 4, 5]
    assert [s.selected for s in ranked] == [True, True, True, True, False]
    with pytest.raises(ValueError):
        rank_models([])


def test_ranking_csv(tmp_path):
    ranked = rank_models([ModelScore(41, 10, 1, 0.25, 0.5)])
    autoenc.write_ranking_csv(ranked, tmp_path / "r.csv")
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert rows == [["window", "feature_dim", "n", "mse", "consistency", "rank"], ["41", "10", "1", "0.25", "0.5", "1"]]


def test_autoenc_graph_end_to_end():
    series = _series(12, seed=3)
    w = init_weights(autoencoder_architecture(101, 41, 4), seed=2)
    model = autoenc.TrainedAutoencoder(41, 4, w)
    graph, cons, r = autoenc.autoenc_graph(model, series, 2, 10, cap=None)
    graph.validate()
    assert 0.0 <= cons <= 1.0 and r > 0
    assert graph.metadata["distance_threshold"] == r
    assert all(e.witnesses >= 2 for e in graph.directed_edges + graph.undirected_edges)
