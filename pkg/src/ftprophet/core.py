"""Domain types and label semantics for delayed-feedback conversion streams.

A conversion stream is a sequence of logged ad events.  Each event carries the
second it was logged (``log_time``) and, if the user eventually converted, the
second the conversion feedback arrived (``conversion_time``).  Feedback later
than ``log_time + d_max`` is treated as "no conversion" and must be coerced to
absent at ingestion, so downstream code can rely on ``delay <= d_max`` holding
everywhere.

All times are integer seconds since the stream epoch.  Types are immutable
after construction and every operation here is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

# One active (index, value) pair per categorical field, field order preserved.
FeatureVector = tuple[tuple[int, float], ...]


class Split(str, Enum):
    """Role of a record in an experiment.

    TRAIN records only feed the training pipelines.  EVAL records are scored
    at log time for metrics; they still flow through the training pipelines
    afterwards like any other logged event (prediction always precedes label
    availability, so there is no leakage).
    """

    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True, slots=True)
class ImpressionRecord:
    """One logged ad event.

    ``conversion_time`` is ``None`` when no feedback ever arrives within the
    maximum delay window.  Ingestion is responsible for coercing feedback
    delayed beyond ``d_max`` to ``None``.
    """

    id: int
    log_time: int
    conversion_time: Optional[int]
    features: FeatureVector
    split: Split = Split.TRAIN

    def __post_init__(self) -> None:
        if self.conversion_time is not None and self.conversion_time < self.log_time:
            raise ValueError(
                f"record {self.id}: conversion_time {self.conversion_time} "
                f"precedes log_time {self.log_time}"
            )
        if not self.features:
            raise ValueError(f"record {self.id}: features must be non-empty")

    @property
    def converted(self) -> bool:
        return self.conversion_time is not None

    @property
    def delay(self) -> Optional[int]:
        """Feedback delay in seconds, or None if the record never converts."""
        if self.conversion_time is None:
            return None
        return self.conversion_time - self.log_time


@dataclass(frozen=True, slots=True)
class TaskSchedule:
    """Ordered delay windows defining the per-window prediction tasks.

    ``delays`` must be strictly increasing and the last entry is the maximum
    feedback delay ``d_max``.
    """

    delays: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.delays) < 1:
            raise ValueError("schedule needs at least one delay window")
        if any(d <= 0 for d in self.delays):
            raise ValueError(f"delay windows must be positive: {self.delays}")
        if any(a >= b for a, b in zip(self.delays, self.delays[1:])):
            raise ValueError(f"delay windows must be strictly increasing: {self.delays}")

    @property
    def k(self) -> int:
        return len(self.delays)

    @property
    def d_max(self) -> int:
        return self.delays[-1]

    def __iter__(self):
        return iter(self.delays)


@dataclass(slots=True)
class SimClock:
    """Simulated wall clock.  Advances only by whole steps, never backwards."""

    tau: int
    step: int = 3600

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise ValueError(f"clock step must be positive, got {self.step}")

    def advance(self, n_steps: int = 1) -> int:
        if n_steps < 0:
            raise ValueError("clock cannot move backwards")
        self.tau += n_steps * self.step
        return self.tau


def observed_label(record: ImpressionRecord, at: int) -> int:
    """Label visible at time ``at``: 1 iff feedback has arrived by then.

    The boundary is closed: feedback landing exactly at ``at`` counts as
    observed.  Undefined (raises) before the record is logged.
    """
    if at < record.log_time:
        raise ValueError(
            f"record {record.id}: label undefined at {at} before log_time {record.log_time}"
        )
    if record.conversion_time is None:
        return 0
    return 1 if record.conversion_time <= at else 0


def final_label(record: ImpressionRecord) -> int:
    """Ground-truth conversion label once the full delay window has elapsed.

    Relies on the ingestion invariant that any feedback beyond ``d_max`` was
    coerced to absent, so "ever converts" and "converts within ``d_max``" are
    the same thing.
    """
    return 1 if record.conversion_time is not None else 0


def matured_subset(
    records: Iterable[ImpressionRecord], tau: int, d: int
) -> list[tuple[ImpressionRecord, int]]:
    """Records old enough at ``tau`` for their ``d``-window label to be final.

    Returns every record with ``log_time < tau - d`` paired with the label
    observed at ``log_time + d``.  For ``d == d_max`` these labels coincide
    with :func:`final_label` on every returned record.
    """
    if d <= 0:
        raise ValueError(f"maturity window must be positive, got {d}")
    cutoff = tau - d
    return [
        (r, observed_label(r, r.log_time + d))
        for r in records
        if r.log_time < cutoff
    ]
