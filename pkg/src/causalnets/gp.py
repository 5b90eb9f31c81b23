"""Gaussian process smoothing of per-compound time series.

One GP is fitted per compound and condition with a squared-exponential
kernel on the log time axis plus white noise.  The length scale is fixed,
the signal variance is shared by all compounds of a data type and the noise
variance is fitted per compound by maximum likelihood.

Posterior summaries (mean and latent SD on the 101 point grid) feed the
log-ratio series and the SD-band ranking; joint posterior samples feed the
synthetic pair generator.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .data import CompoundSeries, TimeGrid

logger = logging.getLogger(__name__)

DEFAULT_LENGTH_SCALE = 2.0
LOG_NOISE_BOUNDS = (-12.0, 4.0)
LOG_SIGNAL_BOUNDS = (-12.0, 8.0)
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class GPFitError(RuntimeError):
    """Gram or posterior covariance not positive definite even after jitter."""


@dataclass(frozen=True)
class KernelParams:
    signal_variance: float
    noise_variance: float
    length_scale: float = DEFAULT_LENGTH_SCALE

    def __post_init__(self):
        for name in ("signal_variance", "noise_variance", "length_scale"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")


def kernel_eval(params: KernelParams, t1: float, t2: float, same_point: bool) -> float:
    k = params.signal_variance * math.exp(-((t1 - t2) ** 2) / (2.0 * params.length_scale**2))
    return k + (params.noise_variance if same_point else 0.0)


def se_kernel(x1, x2, signal_variance, length_scale):
    d = np.subtract.outer(np.asarray(x1, float), np.asarray(x2, float))
    return signal_variance * np.exp(-(d**2) / (2.0 * length_scale**2))


def cholesky_with_jitter(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter 1e-10 ... 1e-4."""
    eye = np.eye(len(a))
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise GPFitError("matrix not positive definite after jitter escalation")


def log_marginal_likelihood(params: KernelParams, x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    k = se_kernel(x, x, params.signal_variance, params.length_scale)
    k[np.diag_indices_from(k)] += params.noise_variance
    chol = cholesky_with_jitter(k)
    alpha = cho_solve((chol, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(chol)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


@dataclass
class GPModel:
    """A fitted GP; immutable after construction apart from the sampling cache.

    Targets are centered on their own mean before fitting and the center is
    added back to every posterior mean, so far from the data the posterior
    reverts to the compound's average rather than to zero.  With
    ``centered=False`` the prior mean is exactly zero.
    """

    params: KernelParams
    train_inputs: np.ndarray
    train_targets: np.ndarray
    compound_id: str = ""
    condition: str = ""
    centered: bool = True
    center: float = field(init=False)
    factor: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    _sample_cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.train_inputs = np.asarray(self.train_inputs, float)
        self.train_targets = np.asarray(self.train_targets, float)
        self.center = float(self.train_targets.mean()) if self.centered else 0.0
        k = se_kernel(self.train_inputs, self.train_inputs, self.params.signal_variance, self.params.length_scale)
        k[np.diag_indices_from(k)] += self.params.noise_variance
        self.factor = cholesky_with_jitter(k)
        self.alpha = cho_solve((self.factor, True), self.train_targets - self.center)

    @classmethod
    def from_series(cls, series: CompoundSeries, params: KernelParams) -> "GPModel":
        return cls(params, series.log_times, series.values, series.compound_id, series.condition)

    def log_marginal_likelihood(self) -> float:
        y = self.train_targets - self.center
        n = len(y)
        return float(-0.5 * y @ self.alpha - np.log(np.diag(self.factor)).sum() - 0.5 * n * math.log(2 * math.pi))

    def predict(self, points, full_cov: bool = False):
        """Posterior mean and latent variance (or covariance) at ``points``."""
        points = np.asarray(points, float)
        p = self.params
        ks = se_kernel(self.train_inputs, points, p.signal_variance, p.length_scale)
        mean = self.center + ks.T @ self.alpha
        v = solve_triangular(self.factor, ks, lower=True)
        if full_cov:
            cov = se_kernel(points, points, p.signal_variance, p.length_scale) - v.T @ v
            return mean, 0.5 * (cov + cov.T)
        var = p.signal_variance - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)

    def sampler(self, points):
        """Cached ``(mean, lower factor)`` of the joint posterior at ``points``."""
        points = np.asarray(points, float)
        key = points.tobytes()
        if key not in self._sample_cache:
            mean, cov = self.predict(points, full_cov=True)
            self._sample_cache[key] = (mean, cholesky_with_jitter(cov))
        return self._sample_cache[key]


@dataclass
class GPSummary:
    compound_id: str
    condition: str
    mean: np.ndarray
    sd: np.ndarray

    def to_dict(self):
        return {"compound_id": self.compound_id, "condition": self.condition,
                "mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["compound_id"], d["condition"], np.array(d["mean"], float), np.array(d["sd"], float))


@dataclass
class RatioSeries:
    compound_id: str
    values: np.ndarray

    def to_dict(self):
        return {"compound_id": self.compound_id, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["compound_id"], np.array(d["values"], float))


def _golden_section_max(f, lo, hi, tol):
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2


def fit_noise_mle(series: CompoundSeries, signal_variance: float,
                  length_scale: float = DEFAULT_LENGTH_SCALE, grid_points: int = 33) -> KernelParams:
    """Maximum-likelihood noise variance with signal variance and length scale fixed.

    A coarse scan over log-noise in [-12, 4] brackets the optimum, then
    golden-section search refines it to 1e-4 log units.
    """
    if len(series) < 2:
        raise ValueError("need at least 2 observations")
    x = series.log_times
    y = series.values - series.values.mean()

    def objective(log_noise):
        p = KernelParams(signal_variance, math.exp(log_noise), length_scale)
        return log_marginal_likelihood(p, x, y)

    lo, hi = LOG_NOISE_BOUNDS
    scan = np.linspace(lo, hi, grid_points)
    values = [objective(v) for v in scan]
    i = int(np.argmax(values))
    step = scan[1] - scan[0]
    best = _golden_section_max(objective, max(lo, scan[i] - step), min(hi, scan[i] + step), 1e-4)
    if objective(best) < values[i]:
        best = scan[i]
    return KernelParams(signal_variance, math.exp(best), length_scale)


def fit_signal_noise_mle(series: CompoundSeries, length_scale: float = DEFAULT_LENGTH_SCALE) -> KernelParams:
    """Joint MLE of signal and noise variance (used to set the shared signal variance)."""
    x = series.log_times
    y = series.values - series.values.mean()
    var = max(float(y.var()), 1e-4)

    def neg(theta):
        p = KernelParams(math.exp(theta[0]), math.exp(theta[1]), length_scale)
        return -log_marginal_likelihood(p, x, y)

    best = None
    for start in ((math.log(var), math.log(var / 10)), (math.log(var / 10), math.log(var / 2))):
        start = np.clip(start, [LOG_SIGNAL_BOUNDS[0], LOG_NOISE_BOUNDS[0]], [LOG_SIGNAL_BOUNDS[1], LOG_NOISE_BOUNDS[1]])
        res = minimize(neg, start, method="L-BFGS-B", bounds=[LOG_SIGNAL_BOUNDS, LOG_NOISE_BOUNDS])
        if best is None or res.fun < best.fun:
            best = res
    return KernelParams(math.exp(best.x[0]), math.exp(best.x[1]), length_scale)


def estimate_signal_variance(series_list, subsample: int = 200, seed: int = 0,
                             length_scale: float = DEFAULT_LENGTH_SCALE) -> float:
    """Average the jointly fitted signal variance over a seeded subsample of series."""
    series_list = [s for s in series_list if len(s) >= 2]
    if not series_list:
        raise ValueError("no series with at least 2 observations")
    rng = np.random.default_rng(seed)
    idx = np.arange(len(series_list))
    if len(idx) > subsample:
        idx = np.sort(rng.choice(idx, subsample, replace=False))
    optima = [fit_signal_noise_mle(series_list[i], length_scale).signal_variance for i in idx]
    return float(np.mean(optima))


def fit_experiment(groups: dict, signal_variance: float | None = None, length_scale: float = DEFAULT_LENGTH_SCALE,
                   subsample: int = 200, seed: int = 0, workers: int = 1) -> dict:
    """Fit one GP per ``(compound_id, condition)`` group.

    Groups with fewer than two observations are skipped.  Returns the models
    keyed like ``groups``.
    """
    usable = {k: s for k, s in groups.items() if len(s) >= 2}
    if not usable:
        return {}
    if signal_variance is None:
        signal_variance = estimate_signal_variance(list(usable.values()), subsample, seed, length_scale)

    def fit(key):
        s = usable[key]
        return GPModel.from_series(s, fit_noise_mle(s, signal_variance, length_scale))

    keys = sorted(usable)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            models = list(pool.map(fit, keys))
    else:
        models = [fit(k) for k in keys]
    return dict(zip(keys, models))


def posterior(model: GPModel, grid: TimeGrid) -> GPSummary:
    mean, var = model.predict(grid.points)
    return GPSummary(model.compound_id, model.condition, mean, np.sqrt(var))


def sample_function(model: GPModel, grid: TimeGrid, seed) -> np.ndarray:
    """One joint posterior draw of the latent function on the grid."""
    mean, chol = model.sampler(grid.points)
    return mean + chol @ np.random.default_rng(seed).standard_normal(len(mean))


def log_ratio(treated: GPSummary, control: GPSummary) -> RatioSeries:
    if treated.compound_id != control.compound_id:
        raise ValueError(f"compound mismatch: {treated.compound_id} vs {control.compound_id}")
    if len(treated.mean) != len(control.mean):
        raise ValueError("summaries are on different grids")
    return RatioSeries(treated.compound_id, treated.mean - control.mean)


def _trapezoid(y, x):
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def sd_band_score(treated: GPSummary, control: GPSummary, k: float, grid: TimeGrid) -> float:
    """Area where the ``k``-SD bands of treated and control do not overlap."""
    if k <= 0:
        raise ValueError("k must be positive")
    gap = np.abs(treated.mean - control.mean) - k * (treated.sd + control.sd)
    return _trapezoid(np.maximum(gap, 0.0), grid.points)


def rank_compounds(scores: dict, top_n: int | None = None) -> list[str]:
    order = sorted(scores, key=lambda c: (-scores[c], c))
    return order if top_n is None else order[:top_n]


def summarize_experiment(models: dict, grid: TimeGrid):
    """Posterior summaries and log ratios for every compound with both conditions."""
    summaries = {key: posterior(m, grid) for key, m in sorted(models.items())}
    ratios = {}
    for cid in sorted({c for c, _ in summaries}):
        if (cid, "treated") in summaries and (cid, "control") in summaries:
            ratios[cid] = log_ratio(summaries[cid, "treated"], summaries[cid, "control"])
    return summaries, ratios


def model_to_dict(model: GPModel) -> dict:
    p = model.params
    return {"compound_id": model.compound_id, "condition": model.condition,
            "signal_variance": p.signal_variance, "noise_variance": p.noise_variance,
            "length_scale": p.length_scale, "log_times": model.train_inputs.tolist(),
            "values": model.train_targets.tolist(), "centered": model.centered}


def model_from_dict(d: dict) -> GPModel:
    params = KernelParams(d["signal_variance"], d["noise_variance"], d["length_scale"])
    return GPModel(params, d["log_times"], d["values"], d["compound_id"], d["condition"], d.get("centered", True))


def save_json(records, path) -> None:
    Path(path).write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
