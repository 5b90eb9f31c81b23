"""Deep-and-wide next-change predictors and graphs read off their weights.

A sample pairs the change of every gene between two consecutive grid
points with the change over the following step.  A stack of bias-free
dense blocks learns to predict the next change; predicting the current
change again (persistence) is the baseline.  Positive weights of a trained
net, thinned per layer and degree-pruned, form a causal graph whose nodes
are genes and hidden units.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import AdamState, LayerSpec, adam_step, backward, forward, init_weights, l1_penalty, loss

logger = logging.getLogger(__name__)

L1_COEFFICIENT = 1e-8
DROPOUT = 0.05


class DeepWideDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class DeepWideSpec:
    depth: int = 2
    width: int = 16
    l1_coefficient: float = L1_COEFFICIENT
    dropout: float = DROPOUT

    def __post_init__(self):
        if not 1 <= self.depth:
            raise ValueError("depth must be positive")
        if self.width < 1:
            raise ValueError("width must be positive")

    def layers(self, genes: int):
        dims = [genes] + [self.width] * (self.depth - 1) + [genes]
        specs = []
        for d_in, d_out in zip(dims, dims[1:]):
            specs += [
                LayerSpec("dense", {"in_dim": d_in, "out_dim": d_out, "has_bias": False,
                                    "l1_coefficient": self.l1_coefficient}),
                LayerSpec("dropout", {"rate": self.dropout}),
                LayerSpec("activation", {"function": "elu"}),
            ]
        return specs


@dataclass
class ChangeDataset:
    genes: list
    inputs: np.ndarray  # (samples, genes): change t-1 -> t
    targets: np.ndarray  # (samples, genes): change t -> t+1
    n_train: int

    @property
    def train(self):
        return self.inputs[:self.n_train], self.targets[:self.n_train]

    @property
    def test(self):
        return self.inputs[self.n_train:], self.targets[self.n_train:]


def build_change_dataset(ratios, genes=None, split_fraction: float = 0.9) -> ChangeDataset:
    """Consecutive-step changes of a set of series; the earliest 90% train."""
    if isinstance(ratios, dict):
        genes = sorted(ratios) if genes is None else list(genes)
        x = np.array([np.asarray(getattr(ratios[g], "values", ratios[g]), float) for g in genes])
    else:
        x = np.asarray(ratios, float)
        genes = [str(i) for i in range(len(x))] if genes is None else list(genes)
    if x.ndim != 2 or x.shape[1] < 3:
        raise ValueError("need at least 3 grid points per series")
    deltas = np.diff(x, axis=1).T
    inputs, targets = deltas[:-1], deltas[1:]
    return ChangeDataset(genes, inputs, targets, int(split_fraction * len(inputs)))


def persistence_mse(inputs, targets) -> float:
    return float(np.mean((np.asarray(targets) - np.asarray(inputs)) ** 2))


def relative_mse(model_mse: float, baseline: float):
    return None if baseline == 0 else model_mse / baseline


@dataclass
class RelativeMSEReport:
    depth: int
    width: int
    n_parameters: int
    train_mse: float
    test_mse: float | None
    train_persistence: float
    test_persistence: float | None
    relative_train: float | None
    relative_test: float | None
    stage_losses: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__)


def predict(weights, inputs) -> np.ndarray:
    return forward(weights, np.asarray(inputs, float))[0]


def _mse(weights, x, y):
    return float(np.mean((predict(weights, x) - y) ** 2)) if len(x) else None


def evaluate(weights, spec: DeepWideSpec, dataset: ChangeDataset, stage_losses=None) -> RelativeMSEReport:
    xtr, ytr = dataset.train
    xte, yte = dataset.test
    train_mse, test_mse = _mse(weights, xtr, ytr), _mse(weights, xte, yte)
    ptr = persistence_mse(xtr, ytr)
    pte = persistence_mse(xte, yte) if len(xte) else None
    return RelativeMSEReport(spec.depth, spec.width, weights.n_parameters(), train_mse, test_mse, ptr, pte,
                             relative_mse(train_mse, ptr),
                             None if test_mse is None or pte is None else relative_mse(test_mse, pte),
                             dict(stage_losses or {}))


def _fit(weights, x, y, epochs, batch_size, seed, state, epoch_offset=0):
    last = float("nan")
    for epoch in range(epoch_offset, epoch_offset + epochs):
        perm = np.random.default_rng([seed, epoch]).permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = perm[start:start + batch_size]
            out, cache = forward(weights, x[idx], training=True, seed=[seed, epoch, start])
            value, grad = loss("mse", out, y[idx])
            value += l1_penalty(weights)
            if not np.isfinite(value):
                raise DeepWideDivergence(f"loss not finite at epoch {epoch}")
            adam_step(state, weights.tensors, backward(cache, grad))
            total += value * len(idx)
        last = total / len(x)
    return last


def train_deepwide(spec: DeepWideSpec, dataset: ChangeDataset, epochs: int = 1000, batch_size: int = 10,
                   seed: int = 0):
    """MSE plus L1 with Adam; returns ``(weights, report)``."""
    x, y = dataset.train
    if not len(x):
        raise ValueError("empty training split")
    weights = init_weights(spec.layers(len(dataset.genes)), seed=seed)
    last = _fit(weights, x, y, epochs, batch_size, seed, AdamState())
    return weights, evaluate(weights, spec, dataset, {"train": last})


def pretrain_then_finetune(spec: DeepWideSpec, datasets: list, target: ChangeDataset, seed: int = 0,
                           pretrain_epochs: int = 500, finetune_epochs: int = 500, batch_size: int = 10):
    """Train on the union of all training splits, then continue on ``target``.

    The optimizer state and the epoch counter carry over, so a lone dataset
    reproduces plain training for the summed epochs.
    """
    if not datasets:
        raise ValueError("pretraining needs at least one dataset")
    genes = len(target.genes)
    for d in datasets:
        if len(d.genes) != genes:
            raise ValueError(f"gene dimension {len(d.genes)} does not match target {genes}")
    x = np.concatenate([d.train[0] for d in datasets])
    y = np.concatenate([d.train[1] for d in datasets])
    weights = init_weights(spec.layers(genes), seed=seed)
    state = AdamState()
    pre = _fit(weights, x, y, pretrain_epochs, batch_size, seed, state)
    fine = _fit(weights, *target.train, finetune_epochs, batch_size, seed, state, epoch_offset=pretrain_epochs)
    return weights, evaluate(weights, spec, target, {"pretrain": pre, "finetune": fine})


def rank_deepwide_models(reports: list) -> list:
    """Relative test MSE ascending (absent values last), then fewer parameters."""
    if not reports:
        raise ValueError("no reports to rank")
    return sorted(reports, key=lambda r: (r.relative_test is None,
                                          r.relative_test if r.relative_test is not None else 0.0,
                                          r.n_parameters, r.depth, r.width))


def write_ranking_csv(reports, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["depth", "width", "train_mse", "test_mse", "relative_test_mse"])
        for r in reports:
            writer.writerow([r.depth, r.width, repr(r.train_mse), repr(r.test_mse), repr(r.relative_test)])


# -- graph extraction ---------------------------------------------------------

@dataclass(frozen=True)
class ExtractionConfig:
    max_degree: int = 3
    max_genes: int = 100
    gene_subset: tuple | None = None

    def __post_init__(self):
        if self.max_degree < 1 or self.max_genes < 1:
            raise ValueError("degree and gene bounds must be positive")


def sparsity_bound(n_in: int, n_out: int) -> int:
    return math.ceil(math.sqrt(2 * n_in * n_out))


def threshold_layer(kernel: np.ndarray, bound: int) -> list:
    """Positive connections at or above the lowest threshold keeping at most ``bound``.

    Returns ``(weight, source, target)`` triples.
    """
    src, dst = np.nonzero(kernel > 0)
    w = kernel[src, dst]
    if len(w) > bound:
        values = np.unique(w)[::-1]
        counts = np.cumsum([np.count_nonzero(w == v) for v in values])
        fits = np.flatnonzero(counts <= bound)
        cut = values[fits[-1]] if len(fits) else np.inf
        keep = w >= cut
        src, dst, w = src[keep], dst[keep], w[keep]
    return [(float(a), int(b), int(c)) for a, b, c in zip(w, src, dst)]


def _dense_kernels(weights):
    return [weights.tensors[f"branch.{i}.kernel"] for i, s in enumerate(weights.branch) if s.kind == "dense"]


def _unit_name(layer: int, index: int, n_layers: int, genes):
    if layer == 0 or layer == n_layers:
        return genes[index]
    return f"L{layer}_U{index}"


def extract_graph(weights, genes, config: ExtractionConfig = ExtractionConfig(), ratios: dict | None = None):
    """Directed graph over genes and hidden units from positive weights.

    ``ratios`` (optional) supplies gene regulation for node coloring.
    """
    from .graphs import CausalGraph, DirectedEdge, Node, regulation_of

    kernels = _dense_kernels(weights)
    n_layers = len(kernels)
    genes = list(genes)
    out_deg, in_deg = {}, {}
    layers = []
    for li, k in enumerate(kernels):
        edges = []
        for w, i, j in threshold_layer(k, sparsity_bound(*k.shape)):
            a = _unit_name(li, i, n_layers, genes)
            b = _unit_name(li + 1, j, n_layers, genes)
            if a == b:  # a single-layer net maps a gene onto itself
                continue
            edges.append((w, i, j, a, b))
            out_deg[a] = out_deg.get(a, 0) + 1
            in_deg[b] = in_deg.get(b, 0) + 1
        layers.append(edges)

    kept = []
    for edges in layers:
        for w, i, j, a, b in sorted(edges):
            if out_deg[a] > config.max_degree or in_deg[b] > config.max_degree:
                out_deg[a] -= 1
                in_deg[b] -= 1
            else:
                kept.append((a, b, w))

    subset = list(config.gene_subset) if config.gene_subset is not None else genes
    shown = set([g for g in subset if g in set(genes)][:config.max_genes])
    gene_set = set(genes)
    kept = [(a, b, w) for a, b, w in kept
            if (a not in gene_set or a in shown) and (b not in gene_set or b in shown)]
    used = {x for a, b, _ in kept for x in (a, b)}
    ratios = ratios or {}
    nodes = [Node(u, regulation_of(ratios[u].values) if u in ratios else None,
                  kind="gene" if u in gene_set else "hidden") for u in sorted(used)]
    directed = [DirectedEdge(a, b, weight=w) for a, b, w in sorted(kept)]
    meta = {"method": "deepwide", "max_degree": config.max_degree, "max_genes": config.max_genes}
    return CausalGraph(nodes, [], directed, meta)
