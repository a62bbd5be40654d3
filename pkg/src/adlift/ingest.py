"""Parsing of request/event logs into typed records, contingency tables and
hourly series.

Input format is UTF-8 delimited text (comma by default) with a mandatory
header row. Level ids are assigned in first-seen order so that runs are
reproducible; empty factor values become the reserved level ``__missing__``.
Timestamps are integer epoch seconds UTC and hour buckets are
``floor(ts / 3600)``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import BadLabel, MissingColumn, RaggedRow, UnalignedWindow

MISSING_LEVEL = "__missing__"

SECONDS_PER_HOUR = 3600


@dataclass(frozen=True)
class Schema:
    """Column layout of a request log."""

    factor_columns: tuple[str, ...]
    label_column: str
    timestamp_column: str | None = None
    user_column: str | None = None
    browser_column: str | None = None

    def __post_init__(self):
        if not self.factor_columns:
            raise ValueError("factor_columns must be non-empty")
        if len(set(self.factor_columns)) != len(self.factor_columns):
            raise ValueError("factor_columns contains duplicates")
        reserved = {self.label_column, self.timestamp_column, self.user_column,
                    self.browser_column}
        overlap = set(self.factor_columns) & reserved
        if overlap:
            raise ValueError(f"factor columns overlap non-factor columns: {sorted(overlap)}")

    @property
    def m(self) -> int:
        return len(self.factor_columns)

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        doc = json.loads(text)
        version = doc.get("version")
        if version != 1:
            raise ValueError(f"unsupported schema version: {version!r}")
        return cls(
            factor_columns=tuple(doc["factors"]),
            label_column=doc["label"],
            timestamp_column=doc.get("timestamp"),
            user_column=doc.get("user"),
            browser_column=doc.get("browser"),
        )

    def to_json(self) -> str:
        doc: dict = {"version": 1, "factors": list(self.factor_columns),
                     "label": self.label_column}
        for key, value in (("timestamp", self.timestamp_column),
                           ("user", self.user_column),
                           ("browser", self.browser_column)):
            if value is not None:
                doc[key] = value
        return json.dumps(doc)


class FactorDictionary:
    """Bijective label <-> id mapping per factor, ids in first-seen order."""

    def __init__(self, factor_names: Sequence[str],
                 levels: Sequence[Sequence[str]] | None = None):
        self.factor_names = list(factor_names)
        self._levels: list[list[str]] = [list(ls) for ls in levels] if levels \
            else [[] for _ in factor_names]
        self._index: list[dict[str, int]] = [
            {label: k for k, label in enumerate(ls)} for ls in self._levels]
        for i, idx in enumerate(self._index):
            if len(idx) != len(self._levels[i]):
                raise ValueError(f"duplicate level labels in factor {self.factor_names[i]!r}")

    @property
    def m(self) -> int:
        return len(self.factor_names)

    def levels(self, factor: int) -> list[str]:
        return list(self._levels[factor])

    def level_count(self, factor: int) -> int:
        return len(self._levels[factor])

    def level_counts(self) -> list[int]:
        return [len(ls) for ls in self._levels]

    def id_of(self, factor: int, label: str) -> int:
        return self._index[factor][label]

    def label_of(self, factor: int, level_id: int) -> str:
        return self._levels[factor][level_id]

    def intern(self, factor: int, label: str) -> int:
        """Return the id for ``label``, assigning the next id if unseen."""
        idx = self._index[factor]
        level_id = idx.get(label)
        if level_id is None:
            level_id = len(self._levels[factor])
            self._levels[factor].append(label)
            idx[label] = level_id
        return level_id

    def fingerprint(self) -> str:
        """Stable digest of factor names and level labels, in id order."""
        payload = json.dumps(
            {"factors": self.factor_names, "levels": self._levels},
            ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return (isinstance(other, FactorDictionary)
                and self.factor_names == other.factor_names
                and self._levels == other._levels)


@dataclass(frozen=True)
class RequestRecord:
    """One bid request: per-factor level ids plus a binary outcome."""

    factors: tuple[int, ...]
    label: int


class RequestBatch(Sequence[RequestRecord]):
    """Array-backed sequence of RequestRecords.

    ``factors`` is an (n, m) int32 matrix of level ids, ``labels`` an (n,)
    int8 vector. Behaves as a read-only list of RequestRecord.
    """

    def __init__(self, factors: np.ndarray, labels: np.ndarray):
        factors = np.ascontiguousarray(factors, dtype=np.int32)
        labels = np.asarray(labels, dtype=np.int8)
        if factors.ndim != 2 or labels.ndim != 1 or len(factors) != len(labels):
            raise ValueError("factors must be (n, m) and labels (n,)")
        self.factors = factors
        self.labels = labels

    @property
    def m(self) -> int:
        return self.factors.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return RequestBatch(self.factors[i], self.labels[i])
        return RequestRecord(tuple(int(v) for v in self.factors[i]),
                             int(self.labels[i]))

    def __iter__(self) -> Iterator[RequestRecord]:
        for row, label in zip(self.factors, self.labels):
            yield RequestRecord(tuple(int(v) for v in row), int(label))

    @classmethod
    def from_records(cls, records: Iterable[RequestRecord]) -> "RequestBatch":
        records = list(records)
        if not records:
            return cls(np.empty((0, 0), dtype=np.int32), np.empty(0, dtype=np.int8))
        return cls(np.array([r.factors for r in records], dtype=np.int32),
                   np.array([r.label for r in records], dtype=np.int8))


class FactorTable:
    """Per-factor contingency counts over levels x outcome.

    ``counts[i]`` is an (L_i, 2) int64 array; column s holds the number of
    records with factor i at level k and label s. Each record contributes
    once per factor, so every factor's counts sum to N.
    """

    def __init__(self, counts: Sequence[np.ndarray], total: int,
                 dictionary: FactorDictionary):
        self.counts = [np.asarray(c, dtype=np.int64) for c in counts]
        self.total = int(total)
        self.dictionary = dictionary
        for i, c in enumerate(self.counts):
            if c.ndim != 2 or c.shape[1] != 2:
                raise ValueError(f"counts[{i}] must have shape (L_i, 2)")
            if (c < 0).any():
                raise ValueError(f"counts[{i}] contains negative entries")
            if int(c.sum()) != self.total:
                raise ValueError(
                    f"counts for factor {i} sum to {int(c.sum())}, expected N={self.total}")

    @property
    def m(self) -> int:
        return len(self.counts)

    def level_count(self, factor: int) -> int:
        return self.counts[factor].shape[0]


@dataclass(frozen=True)
class CookieEvent:
    """One (cookie, browser, timestamp) observation."""

    cookie_id: str
    browser: str
    timestamp: int


@dataclass
class HourlySeries:
    """Contiguous hourly counts; missing hours are stored as zero."""

    start_hour: int
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")

    def __len__(self) -> int:
        return len(self.counts)


def parse_requests(stream: Iterable[str] | str, schema: Schema,
                   delimiter: str = ",") -> tuple[FactorDictionary, RequestBatch]:
    """Parse delimited request-log lines into level ids against a fresh dictionary.

    The header row must contain every schema column (extras are ignored).
    Raises MissingColumn, BadLabel (with the offending line number) or
    RaggedRow. Input order is preserved.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn("input is empty: no header row") from None

    positions = {name: j for j, name in enumerate(header)}
    for col in (*schema.factor_columns, schema.label_column):
        if col not in positions:
            raise MissingColumn(f"column {col!r} not found in header")
    factor_pos = [positions[c] for c in schema.factor_columns]
    label_pos = positions[schema.label_column]
    width = len(header)

    dictionary = FactorDictionary(list(schema.factor_columns))
    intern = dictionary.intern
    factor_rows: list[list[int]] = []
    labels: list[int] = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != width:
            raise RaggedRow(f"line {lineno}: expected {width} fields, got {len(row)}")
        raw_label = row[label_pos]
        if raw_label == "0":
            label = 0
        elif raw_label == "1":
            label = 1
        else:
            raise BadLabel(f"line {lineno}: label must be 0 or 1, got {raw_label!r}")
        factor_rows.append([intern(i, row[j] or MISSING_LEVEL)
                            for i, j in enumerate(factor_pos)])
        labels.append(label)

    factors = (np.array(factor_rows, dtype=np.int32) if factor_rows
               else np.empty((0, schema.m), dtype=np.int32))
    return dictionary, RequestBatch(factors, np.array(labels, dtype=np.int8))


def write_requests_csv(path, schema: Schema, dictionary: FactorDictionary,
                       batch: RequestBatch) -> None:
    """Serialize records back to the delimited form parse_requests accepts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*schema.factor_columns, schema.label_column])
        for row, label in zip(batch.factors, batch.labels):
            writer.writerow([dictionary.label_of(i, int(k)) for i, k in enumerate(row)]
                            + [int(label)])


def build_factor_table(records: RequestBatch | Sequence[RequestRecord],
                       dictionary: FactorDictionary) -> FactorTable:
    """Aggregate records into per-factor (level x label) contingency counts."""
    if not isinstance(records, RequestBatch):
        records = RequestBatch.from_records(records)
    n = len(records)
    counts = []
    for i in range(dictionary.m):
        levels = dictionary.level_count(i)
        if n:
            flat = records.factors[:, i].astype(np.int64) * 2 + records.labels
            c = np.bincount(flat, minlength=levels * 2).reshape(-1, 2)
            if c.shape[0] > levels:
                raise ValueError(f"record level id out of range for factor {i}")
        else:
            c = np.zeros((levels, 2), dtype=np.int64)
        counts.append(c)
    return FactorTable(counts, n, dictionary)


def parse_cookie_events(stream: Iterable[str] | str,
                        delimiter: str = ",") -> list[CookieEvent]:
    """Parse a ``cookie_id,browser,timestamp`` file into CookieEvents."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn("input is empty: no header row") from None
    positions = {name: j for j, name in enumerate(header)}
    for col in ("cookie_id", "browser", "timestamp"):
        if col not in positions:
            raise MissingColumn(f"column {col!r} not found in header")
    ci, bi, ti = positions["cookie_id"], positions["browser"], positions["timestamp"]
    width = len(header)
    events = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != width:
            raise RaggedRow(f"line {lineno}: expected {width} fields, got {len(row)}")
        try:
            ts = int(row[ti])
        except ValueError:
            raise BadLabel(f"line {lineno}: timestamp must be integer epoch seconds, "
                           f"got {row[ti]!r}") from None
        events.append(CookieEvent(row[ci], row[bi], ts))
    return events


def write_events_csv(path, events: Sequence[CookieEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cookie_id", "browser", "timestamp"])
        for ev in events:
            writer.writerow([ev.cookie_id, ev.browser, ev.timestamp])


def aggregate_hourly(events: Sequence[CookieEvent],
                     window: tuple[int, int]) -> tuple[HourlySeries, int]:
    """Count events per hour inside ``window = [t0, t1)``.

    Both boundaries must be hour-aligned epoch seconds. Events outside the
    window are dropped; their number is returned alongside the series.
    """
    t0, t1 = window
    if t0 % SECONDS_PER_HOUR or t1 % SECONDS_PER_HOUR:
        raise UnalignedWindow(f"window boundaries must be hour-aligned: {window}")
    if t0 >= t1:
        raise UnalignedWindow(f"window must satisfy t0 < t1: {window}")
    start_hour = t0 // SECONDS_PER_HOUR
    n_hours = (t1 - t0) // SECONDS_PER_HOUR
    counts = np.zeros(n_hours, dtype=np.int64)
    dropped = 0
    if events:
        ts = np.fromiter((e.timestamp for e in events), dtype=np.int64, count=len(events))
        inside = (ts >= t0) & (ts < t1)
        dropped = int((~inside).sum())
        hours = ts[inside] // SECONDS_PER_HOUR - start_hour
        counts += np.bincount(hours, minlength=n_hours)
    return HourlySeries(start_hour=int(start_hour), counts=counts), dropped
