"""Siamese causality and lag detectors, curriculum training and validation.

The causality detector embeds each series with a shared convolutional
branch and compares embeddings by a dot product, so its probability is
exactly symmetric in its arguments.  The lag detector subtracts the two
flattened branch outputs and applies bias-free odd layers, so its score is
exactly antisymmetric and vanishes on identical inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import AdamState, LayerSpec, adam_step, backward, bce_with_logits, forward, init_weights, loss
from .nn.layers import layer_forward
from .nn.network import load_model, load_model_metadata, save_model
from .synth import RatioPool, SynthConfig, build_labeled_set, build_lag_set

logger = logging.getLogger(__name__)

PAPER_LAG_THRESHOLD = 0.025
EVAL_BATCH = 4096


class TrainingDivergence(RuntimeError):
    def __init__(self, stage: int, message: str = "loss is not finite"):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class CurriculumSchedule:
    stages: tuple = (0, 2, 4, 9)
    epochs_per_stage: int = 100
    batch_size: int = 512

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        if not self.stages:
            raise ValueError("curriculum needs at least one stage")
        if any(b < a for a, b in zip(self.stages, self.stages[1:])):
            raise ValueError("curriculum stages must be nondecreasing")
        if self.epochs_per_stage < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def causality_architecture(window: int = 80, conv_window: int = 61, filters: int = 50):
    if conv_window > window:
        raise ValueError("conv window larger than input window")
    branch = [
        LayerSpec("conv1d", {"window": conv_window, "in_channels": 1, "out_channels": filters, "has_bias": True}),
        LayerSpec("activation", {"function": "relu"}),
        LayerSpec("avg_pool_time"),
        LayerSpec("dense", {"in_dim": filters, "out_dim": filters, "has_bias": True}),
        LayerSpec("activation", {"function": "relu"}),
    ]
    head = [
        LayerSpec("dense", {"in_dim": 1, "out_dim": 1, "has_bias": True}),
        LayerSpec("activation", {"function": "sigmoid"}),
    ]
    return branch, "dot", head


def lag_architecture(window: int = 80, conv_window: int = 61, filters: int = 50, hidden: int = 50):
    if conv_window > window:
        raise ValueError("conv window larger than input window")
    positions = window - conv_window + 1
    branch = [
        LayerSpec("conv1d", {"window": conv_window, "in_channels": 1, "out_channels": filters, "has_bias": True}),
        LayerSpec("activation", {"function": "relu"}),
        LayerSpec("dense", {"in_dim": filters, "out_dim": filters, "has_bias": True}),
        LayerSpec("activation", {"function": "relu"}),
        LayerSpec("flatten"),
    ]
    head = [
        LayerSpec("dense", {"in_dim": positions * filters, "out_dim": hidden, "has_bias": False}),
        LayerSpec("activation", {"function": "tanh"}),
        LayerSpec("dense", {"in_dim": hidden, "out_dim": 1, "has_bias": False}),
        LayerSpec("activation", {"function": "linear"}),
    ]
    return branch, "subtract", head


def _as_batch(x, window):
    x = np.asarray(x, float)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != window:
        raise ValueError(f"expected series of length {window}, got shape {np.shape(x)}")
    return x[:, :, None], single


def _branch(weights, x):
    for i, spec in enumerate(weights.branch):
        x, _ = layer_forward(spec, x, weights.tensors, f"branch.{i}.", False, None)
    return x


def _head(weights, x):
    for i, spec in enumerate(weights.head):
        x, _ = layer_forward(spec, x, weights.tensors, f"head.{i}.", False, None)
    return x


class _Detector:
    kind = ""

    def __init__(self, weights, window: int = 80):
        self.weights = weights
        self.window = window

    def save(self, path, metadata: dict | None = None):
        save_model(self.weights, path, {"detector": self.kind, "window": self.window, **(metadata or {})})

    @classmethod
    def load(cls, path):
        meta = load_model_metadata(path)
        if meta.get("detector", cls.kind) != cls.kind:
            raise ValueError(f"{path} holds a {meta.get('detector')} detector, not {cls.kind}")
        return cls(load_model(path), int(meta.get("window", 80)))

    def _pairs(self, a, b):
        xa, single = _as_batch(a, self.window)
        xb, _ = _as_batch(b, self.window)
        if xa.shape != xb.shape:
            raise ValueError("argument batches differ in shape")
        out = np.concatenate([
            forward(self.weights, (xa[i:i + EVAL_BATCH], xb[i:i + EVAL_BATCH]))[0][:, 0]
            for i in range(0, len(xa), EVAL_BATCH)
        ])
        return float(out[0]) if single else out

    def embed(self, series) -> np.ndarray:
        """Branch features for a stack of series, computed in fixed-size chunks."""
        x, _ = _as_batch(series, self.window)
        return np.concatenate([_branch(self.weights, x[i:i + EVAL_BATCH]) for i in range(0, len(x), EVAL_BATCH)])


class CausalityDetector(_Detector):
    kind = "causality"

    @classmethod
    def initialize(cls, window=80, conv_window=61, filters=50, seed=0):
        return cls(init_weights(*causality_architecture(window, conv_window, filters), seed=seed), window)

    def predict(self, a, b):
        """Probability of a causal dependency; exactly symmetric in ``a``, ``b``."""
        return self._pairs(a, b)

    def pairwise_probability(self, series) -> np.ndarray:
        """All-pairs probability matrix for a stack of series."""
        e = self.embed(series)
        dots = e @ e.T
        return _head(self.weights, dots.reshape(-1, 1)).reshape(dots.shape)


class LagDetector(_Detector):
    kind = "lag"

    @classmethod
    def initialize(cls, window=80, conv_window=61, filters=50, hidden=50, seed=0):
        return cls(init_weights(*lag_architecture(window, conv_window, filters, hidden), seed=seed), window)

    def predict(self, a, b):
        """Signed lag score; positive means ``a`` leads ``b``."""
        return self._pairs(a, b)

    def score_embedded(self, ea, eb) -> np.ndarray:
        return _head(self.weights, np.asarray(ea) - np.asarray(eb))[:, 0]


def predict_causality(model: CausalityDetector, a, b):
    return model.predict(a, b)


def predict_lag(model: LagDetector, a, b):
    return model.predict(a, b)


# -- validation -----------------------------------------------------------

DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.0, 1.0, 101), 2))


@dataclass
class ValidationReport:
    accuracy: float
    auc: float
    roc: list
    confusion: list
    stage: int | None = None
    mixin: int | None = None
    train_accuracy: float | None = None
    train_loss: float | None = None

    def to_dict(self):
        return {"stage": self.stage, "m": self.mixin, "accuracy": self.accuracy, "auc": self.auc,
                "train_accuracy": self.train_accuracy, "train_loss": self.train_loss,
                "roc": self.roc, "confusion": self.confusion}


def roc_from_scores(scores, labels, thresholds=None) -> ValidationReport:
    """ROC by sweeping a probability threshold (``score >= t`` is positive).

    ``thresholds=None`` sweeps every distinct score, which gives the exact
    empirical ROC.  AUC is the trapezoid area including the (0,0) and (1,1)
    corners.
    """
    s = np.asarray(scores, float).ravel()
    y = np.asarray(labels, float).ravel() > 0.5
    if s.size == 0:
        raise ValueError("empty evaluation set")
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    thr = np.unique(s) if thresholds is None else np.asarray(sorted(set(map(float, thresholds))))
    order = np.argsort(s)
    s_sorted, y_sorted = s[order], y[order]
    pos_above = np.concatenate([np.cumsum(y_sorted[::-1])[::-1], [0]])
    neg_above = np.concatenate([np.cumsum(~y_sorted[::-1])[::-1], [0]])
    confusion, points = [], []
    for t in thr:
        k = int(np.searchsorted(s_sorted, t, side="left"))
        tp, fp = int(pos_above[k]), int(neg_above[k])
        fn, tn = n_pos - tp, n_neg - fp
        confusion.append({"threshold": float(t), "tp": tp, "fp": fp, "tn": tn, "fn": fn})
        points.append((fp / n_neg if n_neg else 0.0, tp / n_pos if n_pos else 0.0))
    points = sorted(set(points) | {(0.0, 0.0), (1.0, 1.0)})
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    accuracy = float(np.mean((s >= 0.5) == y))
    return ValidationReport(accuracy, auc, [list(p) for p in points], confusion)


def roc_auc(model: CausalityDetector, test_set, thresholds=DEFAULT_THRESHOLDS) -> ValidationReport:
    if len(test_set) == 0:
        raise ValueError("empty evaluation set")
    scores = model.predict(test_set.first, test_set.second)
    return roc_from_scores(scores, test_set.labels, thresholds)


@dataclass
class LagCalibration:
    threshold: float
    direction_precision: float | None
    coverage: float

    def to_dict(self):
        return asdict(self)


def calibration_from_scores(scores, lag_labels, thresholds) -> list[LagCalibration]:
    s = np.asarray(scores, float).ravel()
    true = np.asarray(lag_labels, float).ravel()
    if s.size == 0:
        raise ValueError("empty evaluation set")
    result = []
    for t in thresholds:
        above = np.abs(s) >= t
        decidable = above & (true != 0)
        precision = float(np.mean(np.sign(s[decidable]) == np.sign(true[decidable]))) if decidable.any() else None
        result.append(LagCalibration(float(t), precision, float(np.mean(above))))
    return result


def calibrate_lag_threshold(model: LagDetector, lag_set, thresholds=(PAPER_LAG_THRESHOLD,)) -> list[LagCalibration]:
    scores = model.predict(lag_set.first, lag_set.second)
    return calibration_from_scores(scores, lag_set.labels, thresholds)


@dataclass
class LagReport:
    mse: float
    mean_abs_error: float
    calibration: list
    stage: int | None = None
    mixin: int | None = None
    train_mse: float | None = None
    train_loss: float | None = None

    def to_dict(self):
        return {"stage": self.stage, "m": self.mixin, "mse": self.mse, "mean_abs_error": self.mean_abs_error,
                "train_mse": self.train_mse, "train_loss": self.train_loss,
                "calibration": [c.to_dict() for c in self.calibration]}


def lag_report(model: LagDetector, lag_set, thresholds=(PAPER_LAG_THRESHOLD,)) -> LagReport:
    scores = model.predict(lag_set.first, lag_set.second)
    err = scores - lag_set.labels
    return LagReport(float(np.mean(err**2)), float(np.mean(np.abs(err))),
                     calibration_from_scores(scores, lag_set.labels, thresholds))


# -- training ---------------------------------------------------------------

def stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1, np.uint32)[0])


def fit_epochs(detector: _Detector, train_set, epochs: int, batch_size: int, seed: int, stage: int = 0,
               state: AdamState | None = None) -> tuple[AdamState, float]:
    """Minibatch Adam on one labeled set.  Returns the optimizer state and last epoch loss."""
    state = state or AdamState()
    weights = detector.weights
    is_lag = detector.kind == "lag"
    x1, _ = _as_batch(train_set.first, detector.window)
    x2, _ = _as_batch(train_set.second, detector.window)
    y = np.asarray(train_set.labels, float)[:, None]
    n = len(y)
    epoch_loss = float("nan")
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, stage, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            out, cache = forward(weights, (x1[idx], x2[idx]), training=True, seed=[seed, stage, epoch, start])
            if is_lag:
                value, grad = loss("mse", out, y[idx])
                grads = backward(cache, grad)
            else:
                value, grad = bce_with_logits(cache["head"][-1][0], y[idx])
                grads = backward(cache, grad, from_logits=True)
            if not np.isfinite(value):
                raise TrainingDivergence(stage)
            adam_step(state, weights.tensors, grads)
            total += value * len(idx)
        epoch_loss = total / n
        logger.debug("stage %d epoch %d loss %.5f", stage, epoch, epoch_loss)
    return state, epoch_loss


def _train_curriculum(detector, build, evaluate, schedule, config, pool, seed):
    reports = []
    state = AdamState()
    for stage, m in enumerate(schedule.stages):
        stage_config = config.with_(mixin=m, seed=stage_seed(seed, stage))
        train, test = build(stage_config, pool)
        state, last = fit_epochs(detector, train, schedule.epochs_per_stage, schedule.batch_size, seed, stage, state)
        report = evaluate(detector, train, test)
        report.stage, report.mixin, report.train_loss = stage, m, last
        logger.info("stage %d (m=%d): %s", stage, m, {k: v for k, v in report.to_dict().items()
                                                      if k in ("accuracy", "auc", "mse")})
        reports.append(report)
    return detector, reports


def train_causality(schedule: CurriculumSchedule, config: SynthConfig, pool: RatioPool, seed: int = 0,
                    conv_window: int = 61, filters: int = 50):
    """Curriculum training; each stage draws a fresh labeled set at its mixin value."""
    detector = CausalityDetector.initialize(config.window, conv_window, filters, seed=seed)

    def evaluate(det, train, test):
        report = roc_auc(det, test)
        probe = train.subset(np.arange(min(len(train), len(test) or 1)))
        report.train_accuracy = roc_auc(det, probe).accuracy
        return report

    return _train_curriculum(detector, build_labeled_set, evaluate, schedule, config, pool, seed)


def train_lag(schedule: CurriculumSchedule, config: SynthConfig, pool: RatioPool, seed: int = 0,
              conv_window: int = 61, filters: int = 50, hidden: int = 50):
    detector = LagDetector.initialize(config.window, conv_window, filters, hidden, seed=seed)

    def evaluate(det, train, test):
        report = lag_report(det, test)
        probe = train.subset(np.arange(min(len(train), len(test) or 1)))
        report.train_mse = lag_report(det, probe).mse
        return report

    return _train_curriculum(detector, build_lag_set, evaluate, schedule, config, pool, seed)


def save_reports(reports, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=1) + "\n", encoding="utf-8")
