"""Streaming data pipelines.

Every training method consumes the logged stream through a cursor-based
pipeline that releases each record exactly once, only after the information
it needs is available:

* :class:`MaturedPipeline` releases records whose ``d``-window label is final
  (logged at least ``d`` seconds ago), labeled with what was observable at
  ``log_time + d``.  Labels never change retroactively.
* :class:`FakeNegativePipeline` emits every record immediately with a fake
  negative label and duplicates it with a positive label when the conversion
  feedback arrives.
* :class:`ExtendedLog` stores the online task predictions captured when each
  record entered the stream; entries become policy-training data once they
  are ``d_max`` old, and persist to a replayable binary file.

Pipelines hold cursors into one shared :class:`StreamArrays`, so memory stays
bounded by the stream itself regardless of how many pipelines run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import FeatureVector, ImpressionRecord, Split

EXTLOG_MAGIC = b"FTPXLOG\x01"


class TimeRegressionError(ValueError):
    """A pipeline was polled with a clock earlier than a previous poll."""


class DuplicateCaptureError(ValueError):
    """A record's online predictions were captured more than once."""


class StreamArrays:
    """Column-oriented view of a log-time-sorted record stream.

    ``t`` uses -1 for "never converts".  ``label_clamp`` (set by the
    simulator) poisons any feedback later than the current clock to absent;
    correct pipelines never query beyond their maturity horizon, so enabling
    it must not change anything.
    """

    def __init__(self, ids, s, t, feat_idx, feat_val, eval_mask):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.s = np.asarray(s, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.int64)
        self.feat_idx = np.asarray(feat_idx, dtype=np.int64)
        self.feat_val = np.asarray(feat_val, dtype=np.float64)
        self.eval_mask = np.asarray(eval_mask, dtype=bool)
        self.label_clamp: Optional[int] = None
        if not (np.diff(self.s) >= 0).all():
            raise ValueError("records must be sorted ascending by log time")
        if len({len(self.ids), len(self.s), len(self.t), len(self.feat_idx)}) != 1:
            raise ValueError("column lengths disagree")

    @classmethod
    def from_records(cls, records: Sequence[ImpressionRecord]) -> "StreamArrays":
        n = len(records)
        if n == 0:
            raise ValueError("empty stream")
        n_fields = len(records[0].features)
        ids = np.empty(n, dtype=np.int64)
        s = np.empty(n, dtype=np.int64)
        t = np.empty(n, dtype=np.int64)
        feat_idx = np.empty((n, n_fields), dtype=np.int64)
        feat_val = np.empty((n, n_fields), dtype=np.float64)
        eval_mask = np.empty(n, dtype=bool)
        for i, rec in enumerate(records):
            ids[i] = rec.id
            s[i] = rec.log_time
            t[i] = -1 if rec.conversion_time is None else rec.conversion_time
            if len(rec.features) != n_fields:
                raise ValueError(f"record {rec.id}: inconsistent field count")
            for f, (idx, val) in enumerate(rec.features):
                feat_idx[i, f] = idx
                feat_val[i, f] = val
            eval_mask[i] = rec.split is Split.EVAL
        return cls(ids, s, t, feat_idx, feat_val, eval_mask)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def n_fields(self) -> int:
        return self.feat_idx.shape[1]

    def observed_labels(self, sel, at) -> np.ndarray:
        """Labels visible at per-record times ``at`` (vectorized observed label)."""
        t = self.t[sel]
        vis = (t >= 0) & (t <= at)
        if self.label_clamp is not None:
            vis &= t <= self.label_clamp
        return vis.astype(np.float64)

    def final_labels(self, sel) -> np.ndarray:
        return (self.t[sel] >= 0).astype(np.float64)

    def arrivals(self, lo_time: int, hi_time: int) -> slice:
        """Row range of records logged in ``[lo_time, hi_time)``."""
        lo = int(np.searchsorted(self.s, lo_time, side="left"))
        hi = int(np.searchsorted(self.s, hi_time, side="left"))
        return slice(lo, hi)


@dataclass
class ReleaseBatch:
    rows: np.ndarray      # stream row numbers
    idx: np.ndarray       # (B, F) feature indices
    val: np.ndarray       # (B, F) feature values
    labels: np.ndarray    # (B,) labels fixed at release time

    def __len__(self) -> int:
        return len(self.rows)


class MaturedPipeline:
    """Releases records with ``log_time < tau - d`` exactly once, labeled at
    ``log_time + d``."""

    def __init__(self, stream: StreamArrays, d: int):
        if d <= 0:
            raise ValueError(f"maturity window must be positive, got {d}")
        self.stream = stream
        self.d = d
        self.cursor = 0
        self.last_tau: Optional[int] = None

    def poll(self, tau: int) -> ReleaseBatch:
        if self.last_tau is not None and tau < self.last_tau:
            raise TimeRegressionError(f"poll at {tau} after {self.last_tau}")
        self.last_tau = tau
        hi = int(np.searchsorted(self.stream.s, tau - self.d, side="left"))
        lo = self.cursor
        self.cursor = max(hi, lo)
        rows = np.arange(lo, self.cursor)
        sel = slice(lo, self.cursor)
        labels = self.stream.observed_labels(sel, self.stream.s[sel] + self.d)
        return ReleaseBatch(
            rows=rows,
            idx=self.stream.feat_idx[sel],
            val=self.stream.feat_val[sel],
            labels=labels,
        )


@dataclass(frozen=True)
class FakeNegativeEvent:
    record_id: int
    emit_time: int
    label: int  # 0 fake negative at log time, 1 duplicate at conversion time
    features: FeatureVector


def emit_fake_negative_stream(
    records: Iterable[ImpressionRecord], up_to: int
) -> list[FakeNegativeEvent]:
    """Time-ordered fake-negative event stream up to and including ``up_to``."""
    events = []
    for rec in records:
        if rec.log_time <= up_to:
            events.append(FakeNegativeEvent(rec.id, rec.log_time, 0, rec.features))
        if rec.conversion_time is not None and rec.conversion_time <= up_to:
            events.append(FakeNegativeEvent(rec.id, rec.conversion_time, 1, rec.features))
    events.sort(key=lambda e: (e.emit_time, e.record_id, e.label))
    return events


class FakeNegativePipeline:
    """Cursor over the merged fake-negative event stream of a StreamArrays."""

    def __init__(self, stream: StreamArrays):
        self.stream = stream
        conv = np.flatnonzero(stream.t >= 0)
        times = np.concatenate([stream.s, stream.t[conv]])
        labels = np.concatenate(
            [np.zeros(len(stream), dtype=np.int8), np.ones(len(conv), dtype=np.int8)]
        )
        rows = np.concatenate([np.arange(len(stream)), conv])
        ids = stream.ids[rows]
        order = np.lexsort((labels, ids, times))
        self.emit_times = times[order]
        self.labels = labels[order].astype(np.float64)
        self.rows = rows[order]
        self.cursor = 0
        self.last_tau: Optional[int] = None

    def poll(self, tau: int) -> ReleaseBatch:
        if self.last_tau is not None and tau < self.last_tau:
            raise TimeRegressionError(f"poll at {tau} after {self.last_tau}")
        self.last_tau = tau
        hi = int(np.searchsorted(self.emit_times, tau, side="right"))
        lo = self.cursor
        self.cursor = max(hi, lo)
        rows = self.rows[lo : self.cursor]
        return ReleaseBatch(
            rows=rows,
            idx=self.stream.feat_idx[rows],
            val=self.stream.feat_val[rows],
            labels=self.labels[lo : self.cursor],
        )


@dataclass(frozen=True)
class ExtendedLogEntry:
    """Persisted form of one extended-log record."""

    record_id: int
    log_time: int
    features: FeatureVector
    task_preds: tuple[float, ...]
    final_label: Optional[int]  # None while the record has not matured
    best_task: Optional[int] = None  # assigned when the policy consumed the entry


class ExtendedLog:
    """Online task predictions captured at log time, consumed once matured.

    Captures are append-only and contiguous in stream order; capturing a row
    twice (or skipping one) raises.  The policy cursor releases entries whose
    ``log_time < tau - d_max`` exactly once.
    """

    def __init__(self, stream: StreamArrays, n_tasks: int, d_max: int):
        self.stream = stream
        self.n_tasks = n_tasks
        self.d_max = d_max
        self.preds = np.zeros((len(stream), n_tasks))
        # best task assigned when the entry matures and is consumed; -1 before
        self.kstar = np.full(len(stream), -1, dtype=np.int8)
        self.n_captured = 0
        self.consumed = 0
        self.last_tau: Optional[int] = None

    def capture(self, rows: slice, preds: np.ndarray) -> None:
        lo, hi = rows.start, rows.stop
        if lo != self.n_captured:
            raise DuplicateCaptureError(
                f"capture must continue at row {self.n_captured}, got {lo}"
            )
        if preds.shape != (hi - lo, self.n_tasks):
            raise ValueError(f"bad capture shape {preds.shape}")
        self.preds[lo:hi] = preds
        self.n_captured = hi

    def poll_mature(self, tau: int) -> slice:
        """Row range of newly matured, captured entries (consumed exactly once)."""
        if self.last_tau is not None and tau < self.last_tau:
            raise TimeRegressionError(f"poll at {tau} after {self.last_tau}")
        self.last_tau = tau
        hi = int(np.searchsorted(self.stream.s, tau - self.d_max, side="left"))
        hi = min(hi, self.n_captured)
        lo = self.consumed
        self.consumed = max(hi, lo)
        return slice(lo, self.consumed)

    def matured_rows(self, tau: int) -> slice:
        """All captured rows matured by ``tau`` (analysis view, no cursor)."""
        hi = int(np.searchsorted(self.stream.s, tau - self.d_max, side="left"))
        return slice(0, min(hi, self.n_captured))


@dataclass
class PolicyBatch:
    rows: slice
    idx: np.ndarray
    val: np.ndarray
    prophecy: np.ndarray  # prophet predictions for the matured entries
    kstar: np.ndarray     # index of the stored task prediction nearest the prophecy

    def __len__(self) -> int:
        return self.rows.stop - self.rows.start


def nearest_task(prophecy: np.ndarray, task_preds: np.ndarray) -> np.ndarray:
    """argmin_k |prophecy - pred_k| per row; exact ties go to the smallest k."""
    dist = np.abs(np.asarray(task_preds) - np.asarray(prophecy)[:, None])
    return np.argmin(dist, axis=1)


def policy_batch(extlog: ExtendedLog, prophet_net, tau: int) -> PolicyBatch:
    """Newly matured extended-log entries with their imitation targets.

    The assigned best task is remembered on the log entry.
    """
    rows = extlog.poll_mature(tau)
    idx = extlog.stream.feat_idx[rows]
    val = extlog.stream.feat_val[rows]
    if rows.stop == rows.start:
        prophecy = np.empty(0)
        kstar = np.empty(0, dtype=np.int64)
    else:
        prophecy = prophet_net.predict(idx, val)
        kstar = nearest_task(prophecy, extlog.preds[rows])
        extlog.kstar[rows] = kstar
    return PolicyBatch(rows=rows, idx=idx, val=val, prophecy=prophecy, kstar=kstar)


# -- extended-log persistence -------------------------------------------------


def write_extended_log(path: str, extlog: ExtendedLog, tau: int) -> int:
    """Append-ready binary dump of all captured entries.

    Entries matured by ``tau`` carry their final label; the rest carry the
    "not yet" sentinel.  Length-prefixed records, little-endian.
    """
    stream = extlog.stream
    matured = stream.s + extlog.d_max < tau
    n = extlog.n_captured
    with open(path, "wb") as fh:
        fh.write(EXTLOG_MAGIC)
        for i in range(n):
            f = stream.n_fields
            payload = struct.pack(
                "<qqHH",
                int(stream.ids[i]),
                int(stream.s[i]),
                f,
                extlog.n_tasks,
            )
            payload += stream.feat_idx[i].astype("<i4").tobytes()
            payload += stream.feat_val[i].astype("<f4").tobytes()
            payload += extlog.preds[i].astype("<f4").tobytes()
            label = int(stream.t[i] >= 0) if matured[i] else -1
            payload += struct.pack("<bb", label, int(extlog.kstar[i]))
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
    return n


def read_extended_log(path: str) -> list[ExtendedLogEntry]:
    entries = []
    with open(path, "rb") as fh:
        magic = fh.read(len(EXTLOG_MAGIC))
        if magic != EXTLOG_MAGIC:
            raise ValueError(f"{path}: bad extended-log magic {magic!r}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (size,) = struct.unpack("<I", head)
            payload = fh.read(size)
            if len(payload) != size:
                raise ValueError(f"{path}: truncated entry")
            rid, s, f, k = struct.unpack_from("<qqHH", payload, 0)
            off = struct.calcsize("<qqHH")
            idx = np.frombuffer(payload, dtype="<i4", count=f, offset=off)
            off += 4 * f
            val = np.frombuffer(payload, dtype="<f4", count=f, offset=off)
            off += 4 * f
            preds = np.frombuffer(payload, dtype="<f4", count=k, offset=off)
            off += 4 * k
            label, kstar = struct.unpack_from("<bb", payload, off)
            entries.append(
                ExtendedLogEntry(
                    record_id=rid,
                    log_time=s,
                    features=tuple((int(i), float(v)) for i, v in zip(idx, val)),
                    task_preds=tuple(float(p) for p in preds),
                    final_label=None if label < 0 else int(label),
                    best_task=None if kstar < 0 else int(kstar),
                )
            )
    return entries
