"""Seeded generators for every statistical object in the system.

All generators are pure functions of (spec, seed) using numpy's PCG64
generator (``np.random.default_rng``) with 64-bit seeds, so streams are
reproducible across runs and platforms. These generators double as the
independent oracles for the estimator tests: planted effects, known
Gamma-Poisson parameters, known churn rates, known intensity profiles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadSpec
from .ingest import (CookieEvent, FactorDictionary, RequestBatch, Schema,
                     SECONDS_PER_HOUR)

HOURS_PER_DAY = 24.0


@dataclass(frozen=True)
class FactorSpec:
    """One categorical factor: level probabilities and per-level log-odds effects."""

    name: str
    levels: tuple[str, ...]
    probs: tuple[float, ...]
    effects: tuple[float, ...]

    def __post_init__(self):
        if not self.levels:
            raise BadSpec(f"factor {self.name!r}: needs at least one level")
        if len(self.probs) != len(self.levels) or len(self.effects) != len(self.levels):
            raise BadSpec(f"factor {self.name!r}: probs/effects length mismatch")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-9:
            raise BadSpec(f"factor {self.name!r}: probs must be non-negative and sum to 1")


@dataclass(frozen=True)
class RequestSpec:
    """Request generator: independent factors, logistic link for the label."""

    n: int
    base_rate: float
    factors: tuple[FactorSpec, ...]

    def __post_init__(self):
        if self.n < 0:
            raise BadSpec("request count must be non-negative")
        if not 0.0 < self.base_rate < 1.0:
            raise BadSpec("base_rate must lie strictly inside (0, 1)")
        if not self.factors:
            raise BadSpec("at least one factor is required")

    def schema(self) -> Schema:
        return Schema(factor_columns=tuple(f.name for f in self.factors),
                      label_column="label")


@dataclass(frozen=True)
class PopulationSpec:
    """Gamma-Poisson visit population: shape k, mean m events per window."""

    k: float
    m: float
    users: int
    window_hours: float

    def __post_init__(self):
        if self.k <= 0 or self.m <= 0:
            raise BadSpec("k and m must be positive")
        if self.users <= 0 or self.window_hours <= 0:
            raise BadSpec("users and window_hours must be positive")


@dataclass(frozen=True)
class ChurnSpec:
    """Per-browser exponential cookie lifetimes and the browser mix."""

    tau_days: dict[str, float]
    mix: dict[str, float]

    def __post_init__(self):
        if not self.mix:
            raise BadSpec("browser mix must be non-empty")
        if set(self.mix) - set(self.tau_days):
            raise BadSpec("every browser in the mix needs a tau_days entry")
        if any(t <= 0 for t in self.tau_days.values()):
            raise BadSpec("cookie lifetimes must be positive")
        if any(p < 0 for p in self.mix.values()) or abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise BadSpec("mix must be non-negative and sum to 1")

    @property
    def browsers(self) -> list[str]:
        return sorted(self.mix)

    def mean_tau_days(self) -> float:
        return sum(self.mix[b] * self.tau_days[b] for b in self.mix)


@dataclass(frozen=True)
class Harmonic:
    period_hours: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if self.period_hours <= 0:
            raise BadSpec("harmonic period must be positive")


@dataclass(frozen=True)
class IntensitySpec:
    """Hourly event intensity: base + linear trend + sinusoidal harmonics."""

    n_hours: int
    base: float
    trend: float = 0.0
    harmonics: tuple[Harmonic, ...] = ()

    def __post_init__(self):
        if self.n_hours <= 0:
            raise BadSpec("n_hours must be positive")

    def value(self, t: np.ndarray | float) -> np.ndarray | float:
        """Intensity (events/hour) at time t hours."""
        v = self.base + self.trend * np.asarray(t, dtype=np.float64)
        for h in self.harmonics:
            v = v + h.amplitude * np.sin(2.0 * math.pi * np.asarray(t) / h.period_hours
                                         + h.phase)
        return v

    def hourly_values(self) -> np.ndarray:
        """Intensity sampled at hour starts, one value per hour."""
        return np.asarray(self.value(np.arange(self.n_hours, dtype=np.float64)))

    def hourly_integrals(self) -> np.ndarray:
        """Exact integral of the intensity over each hour [h, h+1)."""
        h = np.arange(self.n_hours, dtype=np.float64)
        total = self.base + self.trend * (h + 0.5)
        for hm in self.harmonics:
            w = 2.0 * math.pi / hm.period_hours
            total = total + hm.amplitude / w * (np.cos(w * h + hm.phase)
                                                - np.cos(w * (h + 1) + hm.phase))
        return total

    def envelope(self) -> float:
        """Upper bound of the intensity over [0, n_hours]."""
        peak = self.base + max(0.0, self.trend * self.n_hours)
        peak += sum(abs(h.amplitude) for h in self.harmonics)
        return peak


@dataclass(frozen=True)
class SynthSpec:
    """Bundle of generator specs, loadable from a JSON document."""

    seed: int = 0
    requests: RequestSpec | None = None
    population: PopulationSpec | None = None
    churn: ChurnSpec | None = None
    intensity: IntensitySpec | None = None

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        doc = json.loads(text)
        requests = population = churn = intensity = None
        if "requests" in doc:
            r = doc["requests"]
            requests = RequestSpec(
                n=int(r["n"]), base_rate=float(r["base_rate"]),
                factors=tuple(FactorSpec(name=f["name"], levels=tuple(f["levels"]),
                                         probs=tuple(float(p) for p in f["probs"]),
                                         effects=tuple(float(e) for e in f["effects"]))
                              for f in r["factors"]))
        if "population" in doc:
            p = doc["population"]
            population = PopulationSpec(k=float(p["k"]), m=float(p["m"]),
                                        users=int(p["users"]),
                                        window_hours=float(p["window_hours"]))
        if "churn" in doc:
            c = doc["churn"]
            churn = ChurnSpec(tau_days={b: float(t) for b, t in c["tau_days"].items()},
                              mix={b: float(x) for b, x in c["mix"].items()})
        if "intensity" in doc:
            i = doc["intensity"]
            intensity = IntensitySpec(
                n_hours=int(i["n_hours"]), base=float(i["base"]),
                trend=float(i.get("trend", 0.0)),
                harmonics=tuple(Harmonic(period_hours=float(h["period_hours"]),
                                         amplitude=float(h["amplitude"]),
                                         phase=float(h.get("phase", 0.0)))
                                for h in i.get("harmonics", ())))
        return cls(seed=int(doc.get("seed", 0)), requests=requests,
                   population=population, churn=churn, intensity=intensity)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gen_requests(spec: RequestSpec, seed: int) -> tuple[FactorDictionary, RequestBatch]:
    """Draw labeled requests: independent factor levels, logistic label link.

    The label is Bernoulli with log-odds logit(base_rate) plus the planted
    per-level effects of the drawn levels.
    """
    rng = np.random.default_rng(seed)
    n, m = spec.n, len(spec.factors)
    factors = np.empty((n, m), dtype=np.int32)
    logits = np.full(n, math.log(spec.base_rate / (1.0 - spec.base_rate)))
    for i, f in enumerate(spec.factors):
        ids = rng.choice(len(f.levels), size=n, p=np.asarray(f.probs))
        factors[:, i] = ids
        logits += np.asarray(f.effects)[ids]
    labels = (rng.random(n) < _sigmoid(logits)).astype(np.int8)
    dictionary = FactorDictionary([f.name for f in spec.factors],
                                  [list(f.levels) for f in spec.factors])
    return dictionary, RequestBatch(factors, labels)


@dataclass
class PopulationSample:
    """Per-user event counts and flat event times (hours from window start).

    ``times[offsets[u]:offsets[u+1]]`` are user u's event times, sorted.
    """

    counts: np.ndarray
    times: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)
    window_hours: float = 0.0

    @property
    def users(self) -> int:
        return len(self.counts)

    def user_times(self, u: int) -> np.ndarray:
        return self.times[self.offsets[u]:self.offsets[u + 1]]


def gen_gamma_poisson(spec: PopulationSpec, seed: int) -> PopulationSample:
    """Simulate each user's homogeneous Poisson stream with Gamma intensity.

    Window totals lambda_u * T are Gamma(shape k, mean m), so per-window
    counts are marginally NBD(k, m). Event times are uniform on the window
    given the count.
    """
    rng = np.random.default_rng(seed)
    means = rng.gamma(shape=spec.k, scale=spec.m / spec.k, size=spec.users)
    counts = rng.poisson(means).astype(np.int64)
    offsets = np.zeros(spec.users + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    times = rng.random(total) * spec.window_hours
    user_idx = np.repeat(np.arange(spec.users), counts)
    order = np.lexsort((times, user_idx))
    return PopulationSample(counts=counts, times=times[order], offsets=offsets,
                            window_hours=spec.window_hours)


def apply_churn(sample: PopulationSample, churn: ChurnSpec, seed: int,
                start_epoch: int = 0) -> list[CookieEvent]:
    """Split each user's event stream into cookie identities at exponential
    death times.

    Each segment between consecutive deaths gets a fresh cookie id; events
    are conserved, only identities change. Timestamps are epoch seconds.
    """
    rng = np.random.default_rng(seed)
    browsers = churn.browsers
    mix = np.array([churn.mix[b] for b in browsers])
    taus_h = np.array([churn.tau_days[b] * HOURS_PER_DAY for b in browsers])

    users = sample.users
    browser_idx = rng.choice(len(browsers), size=users, p=mix)
    tau_user = taus_h[browser_idx]

    ev_user = np.repeat(np.arange(users), sample.counts)
    ev_time = sample.times

    # deaths form a rate-1/tau Poisson process, so the death count in each
    # inter-event gap is Poisson(gap/tau); an event's segment index is the
    # cumulative death count up to it
    prev_time = np.concatenate(([0.0], ev_time[:-1]))
    first_of_user = np.zeros(len(ev_time), dtype=bool)
    first_of_user[sample.offsets[:-1][sample.counts > 0]] = True
    gaps = np.where(first_of_user, ev_time, ev_time - prev_time)
    deaths_in_gap = rng.poisson(gaps / tau_user[ev_user])
    seg = np.cumsum(deaths_in_gap)
    if len(seg):
        base = np.concatenate(([0], seg[:-1]))
        starts = np.zeros(len(seg), dtype=np.int64)
        starts[first_of_user] = base[first_of_user]
        np.maximum.accumulate(starts, out=starts)
        seg = seg - starts

    ts = start_epoch + (ev_time * SECONDS_PER_HOUR).astype(np.int64)
    return [CookieEvent(cookie_id=f"u{u}s{s}", browser=browsers[browser_idx[u]],
                        timestamp=int(t))
            for u, s, t in zip(ev_user, seg, ts)]


def gen_inhomogeneous_poisson(spec: IntensitySpec, seed: int) -> np.ndarray:
    """Simulate an inhomogeneous Poisson process by thinning.

    Candidates arrive at the constant envelope rate and are accepted with
    probability intensity(t)/envelope, which is exact for any bounded
    intensity. Returns sorted event times in hours.
    """
    rng = np.random.default_rng(seed)
    t_max = float(spec.n_hours)
    grid = np.linspace(0.0, t_max, 4 * spec.n_hours + 1)
    values = np.asarray(spec.value(grid))
    if (values < -1e-9).any():
        raise BadSpec("intensity must be non-negative over the whole window")
    lam_max = spec.envelope()
    if lam_max <= 0.0:
        return np.empty(0)
    n_cand = rng.poisson(lam_max * t_max)
    cand = np.sort(rng.random(n_cand) * t_max)
    accept = rng.random(n_cand) * lam_max < np.maximum(np.asarray(spec.value(cand)), 0.0)
    return cand[accept]


def events_from_times(times_hours: Sequence[float], browser: str = "chrome",
                      start_epoch: int = 0, prefix: str = "c") -> list[CookieEvent]:
    """Wrap raw event times as single-visit CookieEvents (test plumbing)."""
    return [CookieEvent(cookie_id=f"{prefix}{i}", browser=browser,
                        timestamp=start_epoch + int(t * SECONDS_PER_HOUR))
            for i, t in enumerate(times_hours)]
