"""Causal graph synthesis from trained detectors, export and reference checks.

Undirected edges join gene pairs whose causality probability reaches the
cutoff; the lag detector then orients an edge when its score clears the lag
threshold in either direction.  Graphs are written as Graphviz DOT (green
up-regulated and red down-regulated nodes, darker edges for higher
probability) and as JSON.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

WINDOW_POLICIES = ("leading", "trailing", "centered")
UP_COLOR = "#33a02c"
DOWN_COLOR = "#e31a1c"
HIDDEN_COLOR = "#d9d9d9"
NEUTRAL_EDGE = "#808080"
LIGHTEST_GRAY = 0xC0


@dataclass
class Node:
    compound_id: str
    regulation: str | None = None
    sd_score: float | None = None
    kind: str = "gene"


@dataclass
class UndirectedEdge:
    a: str
    b: str
    probability: float | None = None
    witnesses: int | None = None


@dataclass
class DirectedEdge:
    source: str
    target: str
    probability: float | None = None
    lag_score: float | None = None
    causal_probability: float | None = None
    direction_probability: float | None = None
    weight: float | None = None
    witnesses: int | None = None


@dataclass
class CausalGraph:
    nodes: list = field(default_factory=list)
    undirected_edges: list = field(default_factory=list)
    directed_edges: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def node_ids(self) -> set:
        return {n.compound_id for n in self.nodes}

    def edge_pairs(self) -> set:
        """Every edge as an unordered, canonically ordered pair."""
        pairs = {(e.a, e.b) for e in self.undirected_edges}
        pairs |= {tuple(sorted((e.source, e.target))) for e in self.directed_edges}
        return pairs

    def n_edges(self) -> int:
        return len(self.undirected_edges) + len(self.directed_edges)

    def validate(self) -> None:
        ids = self.node_ids()
        undirected = set()
        for e in self.undirected_edges:
            if not e.a < e.b:
                raise ValueError(f"undirected edge ({e.a}, {e.b}) not in canonical order")
            if (e.a, e.b) in undirected:
                raise ValueError(f"duplicate undirected edge ({e.a}, {e.b})")
            undirected.add((e.a, e.b))
        directed = set()
        for e in self.directed_edges:
            if e.source == e.target:
                raise ValueError(f"self edge on {e.source}")
            if (e.source, e.target) in directed:
                raise ValueError(f"duplicate directed edge {e.source} -> {e.target}")
            if tuple(sorted((e.source, e.target))) in undirected:
                raise ValueError(f"{e.source}, {e.target} joined by a directed and an undirected edge")
            directed.add((e.source, e.target))
        for e in self.undirected_edges + self.directed_edges:
            p = e.probability
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
            ends = (e.a, e.b) if isinstance(e, UndirectedEdge) else (e.source, e.target)
            if not set(ends) <= ids:
                raise ValueError(f"edge {ends} references unknown node")

    def sorted(self) -> "CausalGraph":
        return CausalGraph(
            sorted(self.nodes, key=lambda n: n.compound_id),
            sorted(self.undirected_edges, key=lambda e: (e.a, e.b)),
            sorted(self.directed_edges, key=lambda e: (e.source, e.target)),
            dict(self.metadata),
        )

    def to_dict(self) -> dict:
        g = self.sorted()
        directed = []
        for e in g.directed_edges:
            d = asdict(e)
            d["from"] = d.pop("source")
            d["to"] = d.pop("target")
            directed.append(d)
        return {"nodes": [asdict(n) for n in g.nodes],
                "undirected_edges": [asdict(e) for e in g.undirected_edges],
                "directed_edges": directed, "metadata": g.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "CausalGraph":
        directed = []
        for e in d.get("directed_edges", []):
            e = dict(e)
            e["source"] = e.pop("from")
            e["target"] = e.pop("to")
            directed.append(DirectedEdge(**e))
        return cls([Node(**n) for n in d.get("nodes", [])],
                   [UndirectedEdge(**e) for e in d.get("undirected_edges", [])],
                   directed, dict(d.get("metadata", {})))

    def drop_isolated(self) -> "CausalGraph":
        used = {x for pair in self.edge_pairs() for x in pair}
        return CausalGraph([n for n in self.nodes if n.compound_id in used], self.undirected_edges,
                           self.directed_edges, self.metadata)


@dataclass
class SynthesisConfig:
    gene_subset: list = field(default_factory=list)
    probability_cutoff: float = 0.7
    lag_threshold: float = 0.025
    window_policy: str = "centered"
    window: int = 80

    def __post_init__(self):
        if not 0.5 < self.probability_cutoff < 1.0:
            raise ValueError("probability_cutoff must lie in (0.5, 1)")
        if not 0.0 < self.lag_threshold <= 1.0:
            raise ValueError("lag_threshold must lie in (0, 1]")
        if self.window_policy not in WINDOW_POLICIES:
            raise ValueError(f"window_policy must be one of {WINDOW_POLICIES}")


def window_bounds(length: int, window: int, policy: str) -> tuple[int, int]:
    """Half-open index range ``[start, stop)`` of the scored window."""
    if window > length:
        raise ValueError("window longer than series")
    if policy == "leading":
        start = 0
    elif policy == "trailing":
        start = length - window
    elif policy == "centered":
        start = (length - window) // 2
    else:
        raise ValueError(f"unknown window policy {policy!r}")
    return start, start + window


def prepare_input(ratio, policy: str = "centered", window: int = 80):
    """Standardize the full ratio series, then cut the scoring window.

    Returns ``None`` (with a warning) for a constant series.
    """
    values = np.asarray(getattr(ratio, "values", ratio), float)
    sd = values.std()
    if not sd > 1e-12:
        logger.warning("ratio series %s has zero variance; excluded", getattr(ratio, "compound_id", "?"))
        return None
    z = (values - values.mean()) / sd
    start, stop = window_bounds(len(z), window, policy)
    return z[start:stop]


def regulation_of(values) -> str:
    return "up" if float(np.mean(values)) >= 0 else "down"


def _nodes_for(ids, ratios, sd_scores):
    return [Node(c, regulation_of(ratios[c].values), None if sd_scores is None else sd_scores.get(c))
            for c in ids]


def synth_undirected(model, ratios: dict, config: SynthesisConfig, sd_scores: dict | None = None) -> CausalGraph:
    """Keep every unordered gene pair whose probability reaches the cutoff.

    ``model`` needs ``pairwise_probability(stack) -> (n, n) matrix``.  Genes
    are scored in lexicographic order, so the result does not depend on the
    order of ``config.gene_subset``.  Genes without a kept edge are dropped.
    """
    ids, inputs = [], []
    for cid in sorted(set(config.gene_subset)):
        if cid not in ratios:
            logger.warning("gene %s has no ratio series; skipped", cid)
            continue
        x = prepare_input(ratios[cid], config.window_policy, config.window)
        if x is not None:
            ids.append(cid)
            inputs.append(x)
    meta = {"method": "probabilistic", "probability_cutoff": config.probability_cutoff,
            "window_policy": config.window_policy, "window": config.window}
    if len(ids) < 2:
        return CausalGraph(metadata=meta)
    probs = np.asarray(model.pairwise_probability(np.array(inputs)))
    iu, ju = np.triu_indices(len(ids), k=1)
    keep = probs[iu, ju] >= config.probability_cutoff
    edges = [UndirectedEdge(ids[i], ids[j], float(probs[i, j])) for i, j in zip(iu[keep], ju[keep])]
    graph = CausalGraph(_nodes_for(ids, ratios, sd_scores), edges, [], meta)
    return graph.drop_isolated()


def direction_precision(calibration, tau: float) -> float | None:
    """Calibrated direction precision at ``tau``, interpolating between thresholds."""
    rows = sorted((c.threshold, c.direction_precision) for c in calibration if c.direction_precision is not None)
    for t, p in rows:
        if t == tau:
            return p
    if not rows:
        return None
    logger.warning("lag threshold %g not calibrated; interpolating", tau)
    ts = np.array([r[0] for r in rows])
    ps = np.array([r[1] for r in rows])
    return float(np.interp(tau, ts, ps))


def refine_directed(graph: CausalGraph, lag_model, ratios: dict, config: SynthesisConfig,
                    calibration=()) -> CausalGraph:
    """Orient undirected edges whose lag score clears ``±lag_threshold``.

    Directed edges carry the raw causal probability, the calibrated
    direction precision and their product as ``probability``.
    """
    tau = config.lag_threshold
    precision = direction_precision(calibration, tau)
    edges = [(min(e.a, e.b), max(e.a, e.b), e.probability) for e in graph.undirected_edges]
    undirected, directed = [], list(graph.directed_edges)
    if edges:
        a = np.array([prepare_input(ratios[x], config.window_policy, config.window) for x, _, _ in edges])
        b = np.array([prepare_input(ratios[y], config.window_policy, config.window) for _, y, _ in edges])
        scores = np.atleast_1d(lag_model.predict(a, b))
        for (x, y, p), s in zip(edges, scores):
            s = float(s)
            if s >= tau or s <= -tau:
                src, dst = (x, y) if s >= tau else (y, x)
                combined = p if precision is None or p is None else p * precision
                directed.append(DirectedEdge(src, dst, combined, s, p, precision))
            else:
                undirected.append(UndirectedEdge(x, y, p))
    meta = {**graph.metadata, "lag_threshold": tau, "direction_precision": precision}
    return CausalGraph(list(graph.nodes), undirected, directed, meta)


# -- export ---------------------------------------------------------------

def edge_color(probability: float | None) -> str:
    """Gray level linear in probability: 0.7 -> light gray, 1.0 -> black."""
    if probability is None:
        return NEUTRAL_EDGE
    frac = min(max((1.0 - probability) / 0.3, 0.0), 1.0)
    level = int(round(LIGHTEST_GRAY * frac))
    return f"#{level:02x}{level:02x}{level:02x}"


def _quote(s) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(graph: CausalGraph) -> str:
    g = graph.sorted()
    lines = ["digraph causal {", "  node [style=filled, fontname=\"Helvetica\"];"]
    for n in g.nodes:
        if n.kind == "hidden":
            color = HIDDEN_COLOR
        else:
            color = UP_COLOR if n.regulation == "up" else DOWN_COLOR if n.regulation == "down" else HIDDEN_COLOR
        lines.append(f"  {_quote(n.compound_id)} [fillcolor={_quote(color)}];")
    for e in g.undirected_edges:
        lines.append(f"  {_quote(e.a)} -> {_quote(e.b)} [dir=none, color={_quote(edge_color(e.probability))}];")
    for e in g.directed_edges:
        lines.append(f"  {_quote(e.source)} -> {_quote(e.target)} [color={_quote(edge_color(e.probability))}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dot(graph: CausalGraph, path) -> None:
    Path(path).write_text(to_dot(graph), encoding="utf-8")


def export_json(graph: CausalGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def import_json(path) -> CausalGraph:
    return CausalGraph.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- reference comparison -------------------------------------------------

@dataclass
class ReferenceGraph:
    nodes: set
    edges: set
    note: str = ""


def load_profiles(path) -> tuple[list, np.ndarray]:
    """Reference profile CSV: compound id then numeric signature columns."""
    ids, rows = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric profile value") from None
            ids.append(row[0])
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: rows have differing column counts")
    return ids, np.array(rows, float).reshape(len(rows), -1)


def build_correlation_reference(ids, profiles, threshold: float = 0.075, block: int = 1024) -> ReferenceGraph:
    """Edge ``(a, b)`` iff the Pearson correlation of their profiles is at least ``threshold``."""
    x = np.asarray(profiles, float)
    if x.ndim != 2 or x.shape[1] < 3:
        raise ValueError("need at least 3 condition columns")
    sd = x.std(axis=1)
    keep = sd > 1e-12
    for cid in np.asarray(ids)[~keep]:
        logger.warning("profile %s has zero variance; excluded", cid)
    ids = [c for c, k in zip(ids, keep) if k]
    z = (x[keep] - x[keep].mean(axis=1, keepdims=True)) / sd[keep][:, None]
    m = z.shape[1]
    edges = set()
    for start in range(0, len(ids), block):
        corr = z[start:start + block] @ z.T / m
        for i, j in zip(*np.nonzero(corr >= threshold)):
            gi = start + i
            if gi < j:
                a, b = ids[gi], ids[j]
                edges.add((a, b) if a < b else (b, a))
    return ReferenceGraph(set(ids), edges, f"pearson >= {threshold} over {m} profiles")


def compare_to_reference(graph: CausalGraph, ref: ReferenceGraph) -> dict:
    restricted = {p for p in graph.edge_pairs() if p[0] in ref.nodes and p[1] in ref.nodes}
    overlap = len(restricted & ref.edges)
    return {"restricted_edges": len(restricted), "overlap": overlap,
            "accuracy": overlap / len(restricted) if restricted else None}


def brute_force_pairs(ids, score):
    """Exhaustive ``(a, b, score(a, b))`` over unordered pairs, for oracle checks."""
    return [(a, b, score(a, b)) for a, b in combinations(sorted(ids), 2)]
