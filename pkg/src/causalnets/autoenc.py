"""Witness-based causal graphs from convolutional autoencoder features.

A 1D convolutional autoencoder is trained on whole log-ratio series.  Its
encoder convolution, slid over a series, yields one feature vector per
window position; each becomes a *feature occurrence* tagged with the gene
and the window center.  Two occurrences of different genes whose features
lie within a distance threshold witness a potential causal dependency,
directed from the earlier to the later occurrence.  Gene pairs with enough
witnesses become edges.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .nn import AdamState, LayerSpec, adam_step, backward, forward, init_weights, loss
from .nn.layers import conv1d, elu

logger = logging.getLogger(__name__)

PAPER_WINDOWS = (31, 41, 51, 61)
PAPER_WITNESSES = (1, 2, 3, 5, 10)
POOL = 2
SEARCH_ITERATIONS = 24
OCCURRENCE_CAP = 100_000


class AutoencoderDivergence(RuntimeError):
    pass


def autoencoder_architecture(length: int, window: int, feature_dim: int):
    if not 0 < window <= length:
        raise ValueError("window must lie in [1, series length]")
    if feature_dim < 1:
        raise ValueError("feature_dim must be positive")
    positions = length - window + 1
    return [
        LayerSpec("conv1d", {"window": window, "in_channels": 1, "out_channels": feature_dim, "has_bias": True}),
        LayerSpec("avg_pool1d", {"size": POOL}),
        LayerSpec("activation", {"function": "elu"}),
        LayerSpec("upsample1d", {"factor": POOL, "out_length": positions}),
        LayerSpec("conv1d_transpose", {"window": window, "in_channels": feature_dim, "out_channels": 1,
                                       "has_bias": True}),
    ]


@dataclass
class TrainedAutoencoder:
    window: int
    feature_dim: int
    weights: object = None
    train_mse: float | None = None
    val_mse: float | None = None
    epochs: int = 0
    error: str | None = None


def _stack(series):
    if isinstance(series, dict):
        ids = sorted(series)
        x = np.array([np.asarray(getattr(series[c], "values", series[c]), float) for c in ids])
    else:
        ids = None
        x = np.asarray(series, float)
    if x.ndim != 2:
        raise ValueError("expected a set of equal-length series")
    return ids, x


def split_indices(n: int, seed: int, fraction: float = 0.9):
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_train = int(round(fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _mse(weights, x):
    out, _ = forward(weights, x[:, :, None])
    return float(np.mean((out[:, :, 0] - x) ** 2))


def fit_autoencoder(x_train, x_val, window, feature_dim, seed=0, max_epochs=200, batch_size=32,
                    patience=10, min_delta=1e-5) -> TrainedAutoencoder:
    """Adam on MSE with early stopping; the best validation weights are kept."""
    length = x_train.shape[1]
    weights = init_weights(autoencoder_architecture(length, window, feature_dim), seed=[seed, window, feature_dim])
    state = AdamState()
    best = (_mse(weights, x_val), weights.copy(), 0)
    stale = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        perm = np.random.default_rng([seed, window, feature_dim, epoch]).permutation(len(x_train))
        for start in range(0, len(perm), batch_size):
            xb = x_train[perm[start:start + batch_size], :, None]
            out, cache = forward(weights, xb, training=True)
            value, grad = loss("mse", out, xb)
            if not np.isfinite(value):
                raise AutoencoderDivergence(f"window {window}, features {feature_dim}: loss not finite")
            adam_step(state, weights.tensors, backward(cache, grad))
        val = _mse(weights, x_val)
        if val < best[0] - min_delta:
            best, stale = (val, weights.copy(), epoch), 0
        else:
            stale += 1
            if stale >= patience:
                break
    val, weights, _ = best
    return TrainedAutoencoder(window, feature_dim, weights, _mse(weights, x_train), val, epoch)


def train_autoencoders(series, windows=PAPER_WINDOWS, feature_dims=(10,), seed: int = 0, max_epochs: int = 200,
                       batch_size: int = 32, patience: int = 10, min_delta: float = 1e-5) -> list:
    """One autoencoder per (window, feature_dim); a diverging model is reported, not raised."""
    _, x = _stack(series)
    if len(x) < 20:
        raise ValueError("need at least 20 series to train autoencoders")
    tr, va = split_indices(len(x), seed)
    models = []
    for w in windows:
        for f in feature_dims:
            try:
                models.append(fit_autoencoder(x[tr], x[va], w, f, seed, max_epochs, batch_size, patience, min_delta))
            except (AutoencoderDivergence, FloatingPointError) as exc:
                logger.error("autoencoder failed: %s", exc)
                models.append(TrainedAutoencoder(w, f, error=str(exc)))
    return models


# -- occurrences and witnesses ------------------------------------------------

@dataclass
class FeatureOccurrence:
    feature: np.ndarray
    gene: str
    time_index: int


@dataclass
class Occurrences:
    """Occurrence table in columnar form: row ``i`` is one occurrence."""

    features: np.ndarray
    genes: list
    gene_index: np.ndarray
    time_index: np.ndarray

    def __len__(self):
        return len(self.time_index)

    def as_list(self) -> list:
        return [FeatureOccurrence(self.features[i], self.genes[g], int(t))
                for i, (g, t) in enumerate(zip(self.gene_index, self.time_index))]

    def subsample(self, cap: int, seed: int = 0) -> "Occurrences":
        if len(self) <= cap:
            return self
        keep = np.sort(np.random.default_rng([seed, 1]).choice(len(self), cap, replace=False))
        return Occurrences(self.features[keep], self.genes, self.gene_index[keep], self.time_index[keep])


def encoder_features(weights, x) -> np.ndarray:
    """Pre-pool encoder activations ``elu(conv(x))``: ``(n, positions, F)``."""
    w = weights.tensors["branch.0.kernel"]
    b = weights.tensors.get("branch.0.bias")
    y, _ = conv1d(np.asarray(x, float)[:, :, None], w, b)
    return elu(y)


def extract_occurrences(model, series, cap: int | None = OCCURRENCE_CAP, seed: int = 0) -> Occurrences:
    """One occurrence per (gene, window position); time is the window center."""
    weights = getattr(model, "weights", model)
    ids, x = _stack(series)
    if ids is None:
        ids = [str(i) for i in range(len(x))]
    window = weights.tensors["branch.0.kernel"].shape[0]
    feats = encoder_features(weights, x)
    n, positions, f = feats.shape
    occ = Occurrences(feats.reshape(n * positions, f), list(ids), np.repeat(np.arange(n), positions),
                      np.tile(np.arange(positions) + window // 2, n))
    return occ if cap is None else occ.subsample(cap, seed)


@dataclass
class Witnesses:
    """Matched occurrence pairs.  Directed rows run ``src -> dst`` in time;
    undirected rows have ``src < dst`` by occurrence index."""

    src: np.ndarray
    dst: np.ndarray
    directed: np.ndarray
    occurrences: Occurrences = field(repr=False, default=None)

    def __len__(self):
        return len(self.src)

    def gene_pairs(self):
        g = self.occurrences.gene_index
        return g[self.src], g[self.dst]


def _orient(occ, i, j):
    g = occ.gene_index
    cross = g[i] != g[j]
    i, j = i[cross], j[cross]
    ti, tj = occ.time_index[i], occ.time_index[j]
    swap = ti > tj
    src = np.where(swap, j, i)
    dst = np.where(swap, i, j)
    return Witnesses(src, dst, ti != tj, occ)


def match_occurrences(occ: Occurrences, distance_threshold: float) -> Witnesses:
    """All cross-gene occurrence pairs within Euclidean ``distance_threshold``."""
    if distance_threshold < 0:
        raise ValueError("distance threshold must be nonnegative")
    pairs = cKDTree(occ.features).query_pairs(distance_threshold, p=2.0, output_type="ndarray")
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else np.zeros((0, 2), int)
    return _orient(occ, pairs[:, 0].astype(int), pairs[:, 1].astype(int))


def witness_tally(witnesses: Witnesses):
    """Directed counts keyed ``(g, g')`` and undirected counts keyed canonically."""
    genes = witnesses.occurrences.genes
    gs, gd = witnesses.gene_pairs()
    directed, undirected = {}, {}
    for a, b, d in zip(gs, gd, witnesses.directed):
        if d:
            key = (genes[a], genes[b])
            directed[key] = directed.get(key, 0) + 1
        else:
            key = tuple(sorted((genes[a], genes[b])))
            undirected[key] = undirected.get(key, 0) + 1
    return directed, undirected


@dataclass
class LiftedEdges:
    directed: dict  # (g, g') -> witness count
    undirected: dict  # canonical (a, b) -> witness count
    pruned: set  # directed edges removed as inconsistent


def lift_to_genes(witnesses: Witnesses, n: int) -> LiftedEdges:
    """Gene edges from at least ``n`` witnesses, with immediate inconsistencies removed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    d_counts, u_counts = witness_tally(witnesses)
    undirected = {k: c for k, c in u_counts.items() if c >= n}
    directed, pruned = {}, set()
    for (a, b), c in d_counts.items():
        if c < n:
            continue
        if tuple(sorted((a, b))) in undirected or d_counts.get((b, a), 0) >= n:
            pruned.add((a, b))
        else:
            directed[(a, b)] = c
    return LiftedEdges(directed, undirected, pruned)


def consistency(witnesses: Witnesses) -> float:
    """``1 - conflicting / total`` witnesses; conflicting ones point against a pair's majority direction."""
    d_counts, u_counts = witness_tally(witnesses)
    total = sum(d_counts.values()) + sum(u_counts.values())
    if total == 0:
        return 1.0
    conflicts = sum(min(c, d_counts.get((b, a), 0)) for (a, b), c in d_counts.items() if a < b)
    return 1.0 - conflicts / total


# -- threshold search -----------------------------------------------------------

def critical_distances(occ: Occurrences, n: int) -> np.ndarray:
    """Per gene pair, the smallest threshold at which it gathers ``n`` witnesses of some kind.

    A pair is *supported* at threshold ``r`` when its undirected witnesses or
    its directed witnesses in either order reach ``n``; the supported-pair
    count is therefore monotone in ``r``.
    """
    out = []
    gene_rows = [np.flatnonzero(occ.gene_index == g) for g in range(len(occ.genes))]
    sq = np.einsum("ij,ij->i", occ.features, occ.features)
    for g, rows_g in enumerate(gene_rows):
        if not len(rows_g):
            continue
        fg = occ.features[rows_g]
        tg = occ.time_index[rows_g]
        for h in range(g + 1, len(gene_rows)):
            rows_h = gene_rows[h]
            if not len(rows_h):
                continue
            d2 = sq[rows_g][:, None] + sq[rows_h][None, :] - 2.0 * fg @ occ.features[rows_h].T
            d = np.sqrt(np.maximum(d2, 0.0))
            th = occ.time_index[rows_h]
            best = np.inf
            for mask in (tg[:, None] < th[None, :], tg[:, None] > th[None, :], tg[:, None] == th[None, :]):
                vals = d[mask]
                if len(vals) >= n:
                    best = min(best, float(np.partition(vals, n - 1)[n - 1]))
            if np.isfinite(best):
                out.append(best)
    return np.sort(np.array(out))


def supported_pair_count(critical: np.ndarray, threshold: float) -> int:
    return int(np.searchsorted(critical, threshold, side="right"))


def solve_threshold(occ: Occurrences, n: int, target_edges: int) -> float:
    """Smallest threshold (to bisection precision) supporting ``target_edges`` gene pairs."""
    if target_edges < 1:
        raise ValueError("target_edges must be at least 1")
    hi = float(np.linalg.norm(occ.features.max(axis=0) - occ.features.min(axis=0))) if len(occ) else 0.0
    critical = critical_distances(occ, n)
    if supported_pair_count(critical, hi) < target_edges:
        logger.warning("target of %d edges unreachable (max %d); using the largest threshold",
                       target_edges, supported_pair_count(critical, hi))
        return hi
    lo = 0.0
    if supported_pair_count(critical, lo) >= target_edges:
        return lo
    for _ in range(SEARCH_ITERATIONS):
        mid = 0.5 * (lo + hi)
        if supported_pair_count(critical, mid) >= target_edges:
            hi = mid
        else:
            lo = mid
    return hi


# -- ranking and graphs -------------------------------------------------------

@dataclass
class ModelScore:
    window: int
    feature_dim: int
    n: int
    reconstruction_mse: float
    consistency: float
    threshold: float | None = None
    rank: int = 0
    selected: bool = False
    model: object = field(default=None, repr=False, compare=False)


def rank_models(scores: list, top: int = 3) -> list:
    """Consistency descending, then validation MSE ascending; flags the top per window."""
    if not scores:
        raise ValueError("no models to rank")
    ordered = sorted(scores, key=lambda s: (-s.consistency, s.reconstruction_mse, s.window, s.feature_dim, s.n))
    per_window = {}
    for i, s in enumerate(ordered, start=1):
        s.rank = i
        per_window[s.window] = per_window.get(s.window, 0) + 1
        s.selected = per_window[s.window] <= top
    return ordered


def write_ranking_csv(scores, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["window", "feature_dim", "n", "mse", "consistency", "rank"])
        for s in scores:
            writer.writerow([s.window, s.feature_dim, s.n, repr(float(s.reconstruction_mse)),
                             repr(float(s.consistency)), s.rank])


def edges_to_graph(lifted: LiftedEdges, ratios: dict, metadata: dict | None = None):
    from .graphs import CausalGraph, DirectedEdge, Node, UndirectedEdge, regulation_of

    used = {x for pair in list(lifted.directed) + list(lifted.undirected) for x in pair}
    nodes = [Node(c, regulation_of(ratios[c].values) if c in ratios else None) for c in sorted(used)]
    und = [UndirectedEdge(a, b, witnesses=c) for (a, b), c in sorted(lifted.undirected.items())]
    dire = [DirectedEdge(a, b, witnesses=c) for (a, b), c in sorted(lifted.directed.items())]
    return CausalGraph(nodes, und, dire, dict(metadata or {}))


def autoenc_graph(model, ratios: dict, n: int, target_edges: int, cap: int = OCCURRENCE_CAP, seed: int = 0):
    """Solve the threshold for ``target_edges``, then lift and prune witnesses into a graph."""
    occ = extract_occurrences(model, ratios, cap, seed)
    threshold = solve_threshold(occ, n, target_edges)
    witnesses = match_occurrences(occ, threshold)
    lifted = lift_to_genes(witnesses, n)
    meta = {"method": "autoenc", "window": model.window, "feature_dim": model.feature_dim, "n_witnesses": n,
            "target_edges": target_edges, "distance_threshold": threshold, "seed": seed}
    return edges_to_graph(lifted, ratios, meta), consistency(witnesses), threshold
