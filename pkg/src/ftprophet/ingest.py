"""Conversion-log parsing, feature hashing, and canonical log I/O.

Two on-disk formats are understood:

* The public Criteo conversion-log format: one tab-separated line per event
  with a click timestamp, an optional conversion timestamp, 8 integer feature
  columns and 9 categorical token columns.
* A canonical internal format shared with the synthetic generator: one line
  per record, tab separated, ``id  s  t_or_empty  token...`` where every
  token is an already-bucketized small integer.  Canonical files round-trip
  exactly.

Hashing is stable across runs and platforms (BLAKE2, not Python's salted
``hash``).  Bucket 0 of every field is reserved for missing values; real
tokens map into ``[1, n_buckets)``.
"""

from __future__ import annotations

import gzip
import hashlib
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Optional

from .core import FeatureVector, ImpressionRecord, Split

# Criteo conversion-log column layout.
CRITEO_INT_FIELDS = 8
CRITEO_CAT_FIELDS = 9
CRITEO_FIELDS = CRITEO_INT_FIELDS + CRITEO_CAT_FIELDS
CRITEO_COLUMNS = 2 + CRITEO_FIELDS
CRITEO_D_MAX = 30 * 86400  # feedback horizon of the public dataset

MISSING_BUCKET = 0


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


@dataclass(frozen=True)
class FeatureHasher:
    """Maps per-field string tokens to disjoint per-field index ranges.

    Field ``f``'s tokens land in ``[f * n_buckets, (f + 1) * n_buckets)`` so
    fields never collide with each other.  Two kinds are supported:

    * ``"blake2"``: token ``t`` of field ``f`` hashes to
      ``1 + blake2b(f ":" t) % (n_buckets - 1)``; empty tokens take the
      reserved missing bucket 0.
    * ``"identity"``: the token already is a bucket index (canonical logs and
      synthetic data); it must parse as an int in ``[0, n_buckets)``.
    """

    n_fields: int
    n_buckets: int
    kind: str = "blake2"

    def __post_init__(self) -> None:
        if self.n_fields < 1:
            raise ValueError("n_fields must be >= 1")
        if self.n_buckets < 2 or (self.n_buckets & (self.n_buckets - 1)) != 0:
            raise ValueError(f"n_buckets must be a power of two >= 2, got {self.n_buckets}")
        if self.kind not in ("blake2", "identity"):
            raise ValueError(f"unknown hasher kind {self.kind!r}")

    @property
    def vocab_size(self) -> int:
        return self.n_fields * self.n_buckets

    def bucket(self, field: int, token: str) -> int:
        if self.kind == "identity":
            if token == "":
                raise ValueError("identity hasher does not accept empty tokens")
            b = int(token)
            if not 0 <= b < self.n_buckets:
                raise ValueError(f"identity token {token!r} outside [0, {self.n_buckets})")
            return b
        if token == "":
            return MISSING_BUCKET
        digest = hashlib.blake2b(
            f"{field}:{token}".encode("utf-8"), digest_size=8
        ).digest()
        return 1 + int.from_bytes(digest, "little") % (self.n_buckets - 1)


def hash_features(raw_fields: list[str], hasher: FeatureHasher) -> FeatureVector:
    """One active index per field, offset so fields occupy disjoint ranges."""
    if len(raw_fields) != hasher.n_fields:
        raise ValueError(
            f"expected {hasher.n_fields} fields, got {len(raw_fields)}"
        )
    return tuple(
        (f * hasher.n_buckets + hasher.bucket(f, tok), 1.0)
        for f, tok in enumerate(raw_fields)
    )


def bin_integer_feature(raw: str) -> str:
    """Log-scale binning for count-like integer features.

    Values above 2 collapse to ``floor(ln(v)^2)`` so heavy-tailed counts share
    buckets; small and negative values keep their own token.  Empty stays
    empty (missing).
    """
    if raw == "":
        return ""
    v = int(raw)
    if v <= 2:
        return str(v)
    return str(int(math.floor(math.log(v) ** 2)))


def _coerce_conversion(s: int, t: Optional[int], d_max: int) -> Optional[int]:
    # Feedback beyond the horizon is indistinguishable from no feedback.
    if t is None or t - s > d_max:
        return None
    return t


def parse_criteo_line(
    line: str,
    line_no: int,
    hasher: FeatureHasher,
    d_max: int = CRITEO_D_MAX,
    record_id: Optional[int] = None,
    split: Split = Split.TRAIN,
) -> ImpressionRecord:
    """Parse one Criteo conversion-log line into an ImpressionRecord.

    Integer features are log-binned before hashing; empty feature columns map
    to the per-field missing bucket.  Conversions delayed beyond ``d_max``
    become absent.
    """
    cols = line.rstrip("\n").split("\t")
    if len(cols) != CRITEO_COLUMNS:
        raise ParseError(line_no, f"expected {CRITEO_COLUMNS} columns, got {len(cols)}")
    try:
        s = int(cols[0])
    except ValueError:
        raise ParseError(line_no, f"non-numeric click timestamp {cols[0]!r}") from None
    if cols[1] == "":
        t: Optional[int] = None
    else:
        try:
            t = int(cols[1])
        except ValueError:
            raise ParseError(line_no, f"non-numeric conversion timestamp {cols[1]!r}") from None
        if t < s:
            raise ParseError(line_no, f"conversion timestamp {t} precedes click timestamp {s}")
    try:
        tokens = [bin_integer_feature(c) for c in cols[2 : 2 + CRITEO_INT_FIELDS]]
    except ValueError:
        raise ParseError(line_no, "non-numeric integer feature") from None
    tokens += cols[2 + CRITEO_INT_FIELDS :]
    return ImpressionRecord(
        id=line_no - 1 if record_id is None else record_id,
        log_time=s,
        conversion_time=_coerce_conversion(s, t, d_max),
        features=hash_features(tokens, hasher),
        split=split,
    )


def _open_text(path: str, mode: str = "rt") -> IO[str]:
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_criteo_log(
    path: str,
    hasher: FeatureHasher,
    d_max: int = CRITEO_D_MAX,
    eval_window: Optional[tuple[int, int]] = None,
) -> Iterator[ImpressionRecord]:
    """Stream records from a (possibly gzipped) Criteo conversion log.

    Bounded memory: one line is held at a time.  ``eval_window`` marks records
    logged inside ``[start, end)`` as EVAL.
    """
    with _open_text(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            rec = parse_criteo_line(line, line_no, hasher, d_max=d_max)
            if eval_window is not None and eval_window[0] <= rec.log_time < eval_window[1]:
                rec = ImpressionRecord(
                    rec.id, rec.log_time, rec.conversion_time, rec.features, Split.EVAL
                )
            yield rec


def record_tokens(record: ImpressionRecord, n_buckets: int) -> list[str]:
    """Per-field bucket indices of a record, as canonical-format tokens."""
    return [str(idx % n_buckets) for idx, _ in record.features]


def format_canonical_line(record: ImpressionRecord, n_buckets: int) -> str:
    t = "" if record.conversion_time is None else str(record.conversion_time)
    return "\t".join(
        [str(record.id), str(record.log_time), t] + record_tokens(record, n_buckets)
    )


def write_canonical_log(
    records: Iterable[ImpressionRecord], path: str, n_buckets: int
) -> int:
    """Write records in the canonical format; returns the line count."""
    n = 0
    with _open_text(path, "wt") as fh:
        for rec in records:
            fh.write(format_canonical_line(rec, n_buckets))
            fh.write("\n")
            n += 1
    return n


def parse_canonical_line(
    line: str,
    line_no: int,
    hasher: FeatureHasher,
    d_max: int,
    split: Split = Split.TRAIN,
) -> ImpressionRecord:
    cols = line.rstrip("\n").split("\t")
    if len(cols) != 3 + hasher.n_fields:
        raise ParseError(
            line_no, f"expected {3 + hasher.n_fields} columns, got {len(cols)}"
        )
    try:
        rid = int(cols[0])
        s = int(cols[1])
        t = None if cols[2] == "" else int(cols[2])
    except ValueError:
        raise ParseError(line_no, f"non-numeric id or timestamp in {cols[:3]!r}") from None
    try:
        feats = hash_features(cols[3:], hasher)
    except ValueError as exc:
        raise ParseError(line_no, str(exc)) from None
    return ImpressionRecord(
        id=rid,
        log_time=s,
        conversion_time=_coerce_conversion(s, t, d_max),
        features=feats,
        split=split,
    )


def read_canonical_log(
    path: str,
    n_fields: int,
    n_buckets: int,
    d_max: int,
    eval_window: Optional[tuple[int, int]] = None,
) -> Iterator[ImpressionRecord]:
    """Stream records from a canonical log (identity-hashed tokens)."""
    hasher = FeatureHasher(n_fields=n_fields, n_buckets=n_buckets, kind="identity")
    with _open_text(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            split = Split.TRAIN
            rec = parse_canonical_line(line, line_no, hasher, d_max=d_max)
            if eval_window is not None and eval_window[0] <= rec.log_time < eval_window[1]:
                rec = ImpressionRecord(
                    rec.id, rec.log_time, rec.conversion_time, rec.features, Split.EVAL
                )
            yield rec
