"""Observation records, the log time scale and CSV ingestion.

Measurements are log2 values for one compound (transcript, protein or
metabolite) under a ``control`` or ``treated`` condition.  Time is mapped to
``ln(1 + hours)`` so early, densely sampled time points are spread out, and
every Gaussian process is evaluated on a uniform 101 point grid in that
coordinate.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CONDITIONS = ("control", "treated")
CSV_HEADER = ("compound_id", "condition", "replicate_id", "time_hours", "value_log2")
GRID_SIZE = 101


class ParseError(ValueError):
    """Malformed input row."""


class SchemaError(ValueError):
    """Row is well formed but violates the input schema."""


@dataclass(frozen=True)
class RawObservation:
    compound_id: str
    condition: str
    replicate_id: str
    time_hours: float
    value: float

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise SchemaError(f"unknown condition {self.condition!r}")
        if not self.time_hours >= 0:
            raise SchemaError(f"negative time {self.time_hours!r}")
        if not math.isfinite(self.value):
            raise SchemaError(f"non-finite value {self.value!r}")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid in log-time from 0 to ``to_log_time(t_max_hours)``."""

    t_max_hours: float
    size: int = GRID_SIZE
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.t_max_hours > 0:
            raise ValueError("t_max_hours must be positive")
        pts = np.linspace(0.0, to_log_time(self.t_max_hours), self.size)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def span(self) -> float:
        return float(self.points[-1] - self.points[0])


@dataclass
class CompoundSeries:
    compound_id: str
    condition: str
    log_times: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.values)


def to_log_time(time_hours):
    """Map hours since the perturbation to ``ln(1 + hours)``.

    Accepts scalars or arrays.  Negative times raise ``ValueError``.
    """
    t = np.asarray(time_hours, dtype=float)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ValueError("time_hours must be nonnegative")
    out = np.log1p(t)
    return float(out) if out.ndim == 0 else out


def load_observations(path) -> list[RawObservation]:
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: missing header") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            cid, cond, rep, t, v = row
            try:
                t, v = float(t), float(v)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric time or value") from None
            try:
                records.append(RawObservation(cid, cond, rep, t, v))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return records


def write_observations(records, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.compound_id, r.condition, r.replicate_id, repr(r.time_hours), repr(r.value)])


def group_by_compound(records) -> dict[tuple[str, str], CompoundSeries]:
    """Partition observations by ``(compound_id, condition)``.

    Groups with fewer than two observations are kept (the result partitions
    the input) but flagged with a warning; the GP fitting stage skips them.
    """
    times = defaultdict(list)
    values = defaultdict(list)
    for r in records:
        key = (r.compound_id, r.condition)
        times[key].append(r.time_hours)
        values[key].append(r.value)
    groups = {}
    for key in sorted(times):
        if len(times[key]) < 2:
            logger.warning("group %s/%s has fewer than 2 observations; excluded from GP fitting", *key)
        groups[key] = CompoundSeries(
            key[0], key[1], to_log_time(np.array(times[key])), np.array(values[key], dtype=float)
        )
    return groups
