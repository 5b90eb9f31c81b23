"""Synthetic causal pairs drawn from fitted Gaussian processes.

A *normalized ratio* is a posterior draw of treated minus a posterior draw
of control for one gene, standardized to mean 0 and variance 1 over the
full series.  A *lagged pair* windows two such ratios of the same gene so
that the first (the cause) leads the second by ``lag`` grid steps.

Positive pairs keep the cause of one lagged pair and superpose the effects
of ``m + 1`` lagged pairs (the first one plus ``m`` unrelated mixins).
Negative pairs take the cause and all effects from independent draws.
In *ideal* mode both members of a lagged pair come from a single ratio
draw; in *noisy* mode they are two independent draws of the same gene.

Every pair is generated from its own seed ``(seed, stream, index)``, so a
set is reproducible regardless of how generation is partitioned.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TimeGrid

MODES = ("ideal", "noisy")
MAX_REJECTIONS = 100

POSITIVE, NEGATIVE, LAG, SHUFFLE = 0, 1, 2, 3


class SamplingError(RuntimeError):
    """Repeated degenerate (constant) ratio draws."""


@dataclass(frozen=True)
class SynthConfig:
    series_length: int = 101
    window: int = 80
    mixin: int = 0
    mode: str = "noisy"
    set_size: int = 20000
    split_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.window < self.series_length:
            raise ValueError("need 0 < window < series_length")
        if self.mixin < 0:
            raise ValueError("mixin must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.set_size < 1:
            raise ValueError("set_size must be positive")
        if not 0.0 < self.split_fraction <= 1.0:
            raise ValueError("split_fraction must lie in (0, 1]")

    @property
    def max_lag(self) -> int:
        return self.series_length - self.window

    def with_(self, **changes) -> "SynthConfig":
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


@dataclass
class NormalizedRatio:
    gene_id: str
    values: np.ndarray


@dataclass
class LaggedDraw:
    gene_id: str
    lag: int
    cause: np.ndarray
    effect: np.ndarray


@dataclass
class SyntheticPair:
    cause: np.ndarray
    effect: np.ndarray
    label: int
    lag_used: int
    cause_gene: str = ""
    effect_genes: list = field(default_factory=list)


@dataclass
class LagPair:
    first: np.ndarray
    second: np.ndarray
    lag_label: float
    lag: int = 0


def standardize(x) -> np.ndarray:
    x = np.asarray(x, float)
    sd = x.std()
    if not sd > 1e-12:
        raise ValueError("cannot standardize a constant series")
    return (x - x.mean()) / sd


class RatioPool:
    """The gene universe: a control and a treated GP per gene on a shared grid."""

    def __init__(self, models: dict, grid: TimeGrid):
        self.grid = grid
        self.pairs = {}
        for (cid, cond), model in models.items():
            self.pairs.setdefault(cid, {})[cond] = model
        self.genes = sorted(c for c, m in self.pairs.items() if {"control", "treated"} <= set(m))
        if not self.genes:
            raise ValueError("no gene has both a control and a treated model")
        self._samplers = {}

    def __len__(self):
        return len(self.genes)

    def _sampler(self, gene):
        if gene not in self._samplers:
            mt, lt = self.pairs[gene]["treated"].sampler(self.grid.points)
            mc, lc = self.pairs[gene]["control"].sampler(self.grid.points)
            self._samplers[gene] = (mt - mc, lt, lc)
        return self._samplers[gene]

    def sample(self, gene: str, rng) -> np.ndarray:
        """Normalized ratio draw; constant draws are rejected and redrawn."""
        mean, lt, lc = self._sampler(gene)
        n = len(mean)
        for _ in range(MAX_REJECTIONS):
            r = mean + lt @ rng.standard_normal(n) - lc @ rng.standard_normal(n)
            if r.std() > 1e-12:
                return standardize(r)
        raise SamplingError(f"gene {gene}: {MAX_REJECTIONS} constant ratio draws")

    def random_gene(self, rng) -> str:
        return self.genes[int(rng.integers(len(self.genes)))]


def sample_normalized_ratio(gene: str, gp_control, gp_treated, grid: TimeGrid, seed) -> NormalizedRatio:
    """One normalized ratio draw for ``gene`` from its two fitted GPs."""
    pool = RatioPool({(gene, "control"): gp_control, (gene, "treated"): gp_treated}, grid)
    return NormalizedRatio(gene, pool.sample(gene, np.random.default_rng(seed)))


def make_lagged_pair(r_prime, r, lag: int, w: int, max_lag: int | None = None):
    """Window ``r_prime`` and ``r`` so the first leads by ``lag`` steps.

    For ``lag >= 0``: ``first[i] = r_prime[i + lag]`` and ``second[i] = r[i]``.
    A negative lag shifts ``r`` instead, making ``r`` the leading series.
    """
    r_prime = np.asarray(getattr(r_prime, "values", r_prime), float)
    r = np.asarray(getattr(r, "values", r), float)
    if max_lag is None:
        max_lag = min(len(r_prime), len(r)) - w
    if abs(lag) > max_lag:
        raise ValueError(f"|lag| = {abs(lag)} exceeds max lag {max_lag}")
    a = r_prime[max(lag, 0):max(lag, 0) + w]
    b = r[max(-lag, 0):max(-lag, 0) + w]
    if len(a) != w or len(b) != w:
        raise ValueError("series too short for window and lag")
    return a.copy(), b.copy()


def draw_lagged_pair(pool: RatioPool, config: SynthConfig, rng, lag: int | None = None) -> LaggedDraw:
    gene = pool.random_gene(rng)
    if lag is None:
        lag = int(rng.integers(0, config.max_lag + 1))
    r_prime = pool.sample(gene, rng)
    r = r_prime if config.mode == "ideal" else pool.sample(gene, rng)
    cause, effect = make_lagged_pair(r_prime, r, lag, config.window, config.max_lag)
    return LaggedDraw(gene, lag, cause, effect)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def make_positive_pair(config: SynthConfig, pool: RatioPool, seed) -> SyntheticPair:
    rng = _rng(seed)
    draws = [draw_lagged_pair(pool, config, rng) for _ in range(config.mixin + 1)]
    effect = standardize(np.sum([d.effect for d in draws], axis=0))
    return SyntheticPair(draws[0].cause, effect, 1, draws[0].lag, draws[0].gene_id, [d.gene_id for d in draws])


def make_negative_pair(config: SynthConfig, pool: RatioPool, seed) -> SyntheticPair:
    rng = _rng(seed)
    source = draw_lagged_pair(pool, config, rng)
    draws = [draw_lagged_pair(pool, config, rng) for _ in range(config.mixin + 1)]
    effect = standardize(np.sum([d.effect for d in draws], axis=0))
    return SyntheticPair(source.cause, effect, 0, source.lag, source.gene_id, [d.gene_id for d in draws])


def make_lag_pair(config: SynthConfig, pool: RatioPool, seed, lag: int | None = None) -> LagPair:
    """Positive-style pair with a signed lag; negative lags swap the members."""
    rng = _rng(seed)
    if lag is None:
        lag = int(rng.integers(-config.max_lag, config.max_lag + 1))
    if abs(lag) > config.max_lag:
        raise ValueError(f"|lag| = {abs(lag)} exceeds max lag {config.max_lag}")
    draws = [draw_lagged_pair(pool, config, rng, lag=abs(lag))]
    draws += [draw_lagged_pair(pool, config, rng) for _ in range(config.mixin)]
    cause = draws[0].cause
    effect = standardize(np.sum([d.effect for d in draws], axis=0))
    first, second = (cause, effect) if lag >= 0 else (effect, cause)
    return LagPair(first, second, lag / config.max_lag, lag)


@dataclass
class LabeledPairSet:
    """Stacked pairs: ``first``/``second`` are ``(n, w)``, ``labels`` is ``(n,)``.

    Labels are 0/1 for causality sets and ``lag / max_lag`` for lag sets.
    """

    first: np.ndarray
    second: np.ndarray
    labels: np.ndarray
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledPairSet":
        return LabeledPairSet(self.first[idx], self.second[idx], self.labels[idx], self.config)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "first.npy", self.first)
        np.save(d / "second.npy", self.second)
        np.save(d / "labels.npy", self.labels)
        (d / "config.json").write_text(json.dumps(self.config, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "LabeledPairSet":
        d = Path(directory)
        return cls(np.load(d / "first.npy"), np.load(d / "second.npy"), np.load(d / "labels.npy"),
                   json.loads((d / "config.json").read_text()))


def _split(first, second, labels, config: SynthConfig, kind: str):
    perm = np.random.default_rng([config.seed, SHUFFLE]).permutation(len(labels))
    first, second, labels = first[perm], second[perm], labels[perm]
    n_train = int(round(config.split_fraction * len(labels)))
    meta = {"kind": kind, **config.to_dict()}
    train = LabeledPairSet(first[:n_train], second[:n_train], labels[:n_train], {**meta, "split": "train"})
    test = LabeledPairSet(first[n_train:], second[n_train:], labels[n_train:], {**meta, "split": "test"})
    return train, test


def build_labeled_set(config: SynthConfig, pool: RatioPool):
    """Balanced causality set (``set_size`` pairs per class), shuffled and split."""
    n = config.set_size
    pairs = [make_positive_pair(config, pool, [config.seed, POSITIVE, i]) for i in range(n)]
    pairs += [make_negative_pair(config, pool, [config.seed, NEGATIVE, i]) for i in range(n)]
    first = np.array([p.cause for p in pairs])
    second = np.array([p.effect for p in pairs])
    labels = np.array([float(p.label) for p in pairs])
    return _split(first, second, labels, config, "causality")


def build_lag_set(config: SynthConfig, pool: RatioPool):
    """Lag-labelled set of ``set_size`` pairs with lags uniform on ``[-M_L, M_L]``."""
    pairs = [make_lag_pair(config, pool, [config.seed, LAG, i]) for i in range(config.set_size)]
    first = np.array([p.first for p in pairs])
    second = np.array([p.second for p in pairs])
    labels = np.array([p.lag_label for p in pairs])
    return _split(first, second, labels, config, "lag")
