"""Sparse importance-weighted conversion-rate predictor and pacing control.

A trained model combines per-level smoothed positive rates with per-factor
importance weights: the score of a request is the importance-weighted mean
of the rates at the request's levels, over factors whose importance survived
the sparsity threshold. Rates use add-beta smoothing so they stay strictly
inside (0, 1); factors whose level was not seen at training drop out of the
combination and the weights renormalize. A trained model is immutable and
safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (AllPrunedWarning, CorruptFile, DimensionMismatch,
                     FingerprintMismatch, VersionMismatch)
from .features import ImportanceVector
from .ingest import FactorDictionary, FactorTable, RequestBatch, RequestRecord

MODEL_VERSION = 1

DEFAULT_EPSILON = 0.01
DEFAULT_BETA = 0.5


@dataclass(slots=True)
class ScoredRequest:
    record: RequestRecord
    score: float
    used_factors: int


class SparseRateModel:
    """Trained predictor: per-factor importances and per-level smoothed rates."""

    def __init__(self, factor_names: Sequence[str], level_labels: Sequence[Sequence[str]],
                 importance: Sequence[float], rates: Sequence[Sequence[float]],
                 epsilon: float, beta: float, global_rate: float, fingerprint: str,
                 method: str = "shannon", alpha: float | None = None):
        self.factor_names = list(factor_names)
        self.level_labels = [list(ls) for ls in level_labels]
        self.importance = np.asarray(importance, dtype=np.float64)
        self.rates = [np.asarray(r, dtype=np.float64) for r in rates]
        self.epsilon = float(epsilon)
        self.beta = float(beta)
        self.global_rate = float(global_rate)
        self.fingerprint = fingerprint
        self.method = method
        self.alpha = alpha
        if not (len(self.factor_names) == len(self.level_labels)
                == len(self.importance) == len(self.rates)):
            raise ValueError("inconsistent per-factor field lengths")
        for r in self.rates:
            if len(r) and not ((r > 0.0) & (r < 1.0)).all():
                raise ValueError("smoothed rates must lie strictly inside (0, 1)")
        # hot-path caches: python floats/tuples beat numpy scalars per call
        self._active = tuple(
            (i, float(self.importance[i]), tuple(float(q) for q in self.rates[i]),
             len(self.rates[i]))
            for i in range(self.m) if self.importance[i] > 0.0)
        self._level_maps = [{label: k for k, label in enumerate(ls)}
                            for ls in self.level_labels]

    @property
    def m(self) -> int:
        return len(self.factor_names)

    @property
    def all_pruned(self) -> bool:
        return not self._active

    def encode_labels(self, labels: Sequence[str]) -> tuple[int, ...]:
        """Map level labels to training ids; unseen labels become -1."""
        if len(labels) != self.m:
            raise DimensionMismatch(f"expected {self.m} labels, got {len(labels)}")
        return tuple(lm.get(lab, -1) for lm, lab in zip(self._level_maps, labels))


def train(table: FactorTable, importance: ImportanceVector,
          epsilon: float = DEFAULT_EPSILON, beta: float = DEFAULT_BETA) -> SparseRateModel:
    """Fit the sparse rate model from contingency counts and importances.

    Level rates are (n_pos + beta) / (n + 2 beta); importances at or below
    epsilon are zeroed. If every factor is pruned the model degenerates to
    the smoothed global rate and an AllPrunedWarning is emitted.
    """
    if importance.m != table.m:
        raise DimensionMismatch(
            f"importance has {importance.m} entries for {table.m} factors")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if beta <= 0:
        raise ValueError("beta must be positive")
    kept = np.where(importance.values > epsilon, importance.values, 0.0)
    rates = []
    for counts in table.counts:
        totals = counts.sum(axis=1)
        rates.append((counts[:, 1] + beta) / (totals + 2.0 * beta))
    positives = int(table.counts[0][:, 1].sum())
    global_rate = (positives + beta) / (table.total + 2.0 * beta)
    model = SparseRateModel(
        factor_names=table.dictionary.factor_names,
        level_labels=[table.dictionary.levels(i) for i in range(table.m)],
        importance=kept, rates=rates, epsilon=epsilon, beta=beta,
        global_rate=global_rate, fingerprint=table.dictionary.fingerprint(),
        method=importance.method, alpha=importance.alpha)
    if model.all_pruned:
        warnings.warn("every factor importance is at or below epsilon; "
                      "model degenerates to the global rate", AllPrunedWarning)
    return model


def score(model: SparseRateModel, x: RequestRecord,
          dictionary: FactorDictionary | None = None) -> ScoredRequest:
    """Score one request: importance-weighted mean of its level rates.

    Factors with unseen levels (id outside the training range) are excluded
    and the weights renormalize; if nothing contributes the score falls back
    to the global rate. Deterministic: same model and request give the same
    bits on every run.
    """
    if dictionary is not None and dictionary.fingerprint() != model.fingerprint:
        raise FingerprintMismatch("record dictionary does not match the model's")
    factors = x.factors
    if len(factors) != model.m:
        raise DimensionMismatch(f"record has {len(factors)} factors, model has {model.m}")
    num = 0.0
    den = 0.0
    used = 0
    for i, imp, rates, n_levels in model._active:
        k = factors[i]
        if 0 <= k < n_levels:
            num += imp * rates[k]
            den += imp
            used += 1
    if used == 0:
        return ScoredRequest(x, model.global_rate, 0)
    return ScoredRequest(x, num / den, used)


@dataclass
class BatchScores:
    """Element-wise scores for a batch, with measured throughput."""

    records: Sequence[RequestRecord]
    scores: np.ndarray = field(repr=False)
    used_factors: np.ndarray = field(repr=False)
    errors: list[tuple[int, Exception]] = field(default_factory=list, repr=False)
    elapsed_s: float = 0.0

    @property
    def throughput_rps(self) -> float:
        return len(self.scores) / self.elapsed_s if self.elapsed_s > 0 else float("inf")

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self):
        for rec, sc, uf in zip(self.records, self.scores, self.used_factors):
            yield ScoredRequest(rec, float(sc), int(uf))


def _score_matrix(model: SparseRateModel, factors: np.ndarray):
    n = len(factors)
    num = np.zeros(n)
    den = np.zeros(n)
    used = np.zeros(n, dtype=np.int64)
    # accumulate factor by factor in index order so the result is
    # bit-identical to the scalar path
    for i, imp, _, n_levels in model._active:
        ids = factors[:, i]
        known = (ids >= 0) & (ids < n_levels)
        q = model.rates[i][np.where(known, ids, 0)]
        num += np.where(known, imp * q, 0.0)
        den += np.where(known, imp, 0.0)
        used += known
    any_used = used > 0
    scores = np.where(any_used, num / np.where(any_used, den, 1.0), model.global_rate)
    return scores, used


def worker_count() -> int:
    """Worker-thread cap: ADLIFT_THREADS, defaulting to available parallelism."""
    raw = os.environ.get("ADLIFT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def score_batch(model: SparseRateModel,
                records: RequestBatch | Iterable[RequestRecord],
                dictionary: FactorDictionary | None = None,
                threads: int | None = None) -> BatchScores:
    """Score a stream element-wise, preserving order and measuring throughput.

    Per-record failures (wrong arity) are collected in ``errors`` with NaN
    scores rather than aborting the batch. Results do not depend on the
    thread count.
    """
    if dictionary is not None and dictionary.fingerprint() != model.fingerprint:
        raise FingerprintMismatch("record dictionary does not match the model's")
    t_start = time.perf_counter()
    errors: list[tuple[int, Exception]] = []
    if isinstance(records, RequestBatch):
        if len(records) and records.m != model.m:
            raise DimensionMismatch(f"batch has {records.m} factors, model has {model.m}")
        matrix = records.factors
        seq: Sequence[RequestRecord] = records
    else:
        seq = list(records)
        matrix = np.zeros((len(seq), model.m), dtype=np.int32)
        for j, rec in enumerate(seq):
            if len(rec.factors) != model.m:
                errors.append((j, DimensionMismatch(
                    f"record {j} has {len(rec.factors)} factors, model has {model.m}")))
                matrix[j, :] = -1
            else:
                matrix[j, :] = rec.factors

    n = len(matrix)
    if n == 0:
        return BatchScores(seq, np.empty(0), np.empty(0, dtype=np.int64), errors,
                           time.perf_counter() - t_start)

    n_threads = min(threads if threads is not None else worker_count(),
                    max(1, n // 65536))
    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        bounds = np.linspace(0, n, n_threads + 1, dtype=np.int64)
        chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if a < b]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda ab: _score_matrix(model, matrix[ab[0]:ab[1]]),
                                  chunks))
        scores = np.concatenate([p[0] for p in parts])
        used = np.concatenate([p[1] for p in parts])
    else:
        scores, used = _score_matrix(model, matrix)

    for j, _ in errors:
        scores[j] = np.nan
        used[j] = 0
    return BatchScores(seq, scores, used, errors, time.perf_counter() - t_start)


@dataclass
class PacingState:
    """Feedback controller spending ``target_total`` impressions over a stream.

    Mutated in place by ``pace``; confine one state to one decision thread.
    """

    target_total: int
    horizon_requests: int
    threshold: float = 0.0
    shown_so_far: int = 0
    seen_so_far: int = 0
    block_size: int = 1000
    gamma: float = 0.5
    block_seen: int = 0
    block_shown: int = 0


def pace(state: PacingState, scored: ScoredRequest) -> bool:
    """Decide show/skip for one scored request and update the controller.

    Shows iff the score clears the current threshold and the target is not
    yet exhausted. After every block of ``block_size`` requests the threshold
    moves multiplicatively toward the pace that would spend the remaining
    target by the horizon: threshold *= (shown_rate / target_rate)^gamma,
    clamped to [0, 1].
    """
    show = (state.shown_so_far < state.target_total
            and scored.score >= state.threshold)
    if show:
        state.shown_so_far += 1
        state.block_shown += 1
    state.seen_so_far += 1
    state.block_seen += 1
    if state.block_seen >= state.block_size:
        shown_rate = state.block_shown / state.block_seen
        remaining = state.target_total - state.shown_so_far
        horizon_left = state.horizon_requests - state.seen_so_far
        target_rate = remaining / horizon_left if horizon_left > 0 else 0.0
        if target_rate <= 0.0:
            state.threshold = 1.0
        else:
            state.threshold = min(1.0, max(0.0, state.threshold
                                           * (shown_rate / target_rate) ** state.gamma))
        state.block_seen = 0
        state.block_shown = 0
    return show


def save_model(model: SparseRateModel, path) -> None:
    """Write the model as one JSON line plus a trailing sha256 checksum line."""
    doc = {
        "version": MODEL_VERSION,
        "epsilon": model.epsilon,
        "beta": model.beta,
        "global_rate": model.global_rate,
        "fingerprint": model.fingerprint,
        "method": model.method,
        "alpha": model.alpha,
        "factors": [
            {"name": name,
             "importance": float(model.importance[i]),
             "levels": {label: float(model.rates[i][k])
                        for k, label in enumerate(model.level_labels[i])}}
            for i, name in enumerate(model.factor_names)],
    }
    body = json.dumps(doc, ensure_ascii=False)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(body + "\n" + "sha256:" + digest + "\n")


def load_model(path) -> SparseRateModel:
    """Read a model file back, verifying version and checksum."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    if len(lines) < 2 or not lines[-1].startswith("sha256:"):
        raise CorruptFile(f"{path}: missing checksum line")
    body = "\n".join(lines[:-1])
    expected = lines[-1][len("sha256:"):]
    actual = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if actual != expected:
        raise CorruptFile(f"{path}: checksum mismatch")
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: invalid JSON body: {exc}") from exc
    version = doc.get("version")
    if version != MODEL_VERSION:
        raise VersionMismatch(f"{path}: model version {version!r}, "
                              f"expected {MODEL_VERSION}")
    factors = doc["factors"]
    return SparseRateModel(
        factor_names=[f["name"] for f in factors],
        level_labels=[list(f["levels"].keys()) for f in factors],
        importance=[f["importance"] for f in factors],
        rates=[list(f["levels"].values()) for f in factors],
        epsilon=doc["epsilon"], beta=doc["beta"], global_rate=doc["global_rate"],
        fingerprint=doc["fingerprint"], method=doc.get("method", "shannon"),
        alpha=doc.get("alpha"))
