"""SSA reconstruction/forecasting of hourly series, virtual-time rescaling,
and forecast-deviation alarms.

SSA embeds the series into an L x (n-L+1) Hankel trajectory matrix, keeps
the leading singular components, reconstructs by diagonal averaging, and
forecasts with the linear recurrence implied by the signal subspace.
Virtual time stretches the clock so that every unit carries roughly the
same expected number of events, which removes daily/weekly seasonality
before mixed-Poisson modelling.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, DomainError, OutOfDomain,
                     RankDeficientWarning, TooShort,
                     UnstableRecurrenceWarning, ZeroTotal)
from .ingest import HourlySeries, SECONDS_PER_HOUR

DEFAULT_WINDOW = 168  # one week of hours
RANK_ENERGY_TARGET = 0.95


def _as_series_values(series) -> tuple[np.ndarray, int]:
    if isinstance(series, HourlySeries):
        return series.counts.astype(np.float64), series.start_hour
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError("series must be one-dimensional")
    return arr, 0


def default_window_length(n: int) -> int:
    return DEFAULT_WINDOW if n >= 2 * DEFAULT_WINDOW else n // 2


@dataclass
class SsaModel:
    """Fitted SSA decomposition with recurrent-forecasting coefficients."""

    window: int
    rank: int
    singular_values: np.ndarray = field(repr=False)
    recurrence: np.ndarray = field(repr=False)
    reconstructed: np.ndarray = field(repr=False)
    start_hour: int = 0
    rank_reduced: bool = False
    verticality: float = 0.0
    _max_root_modulus: float | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.reconstructed)

    def max_root_modulus(self) -> float:
        """Largest modulus among the recurrence's characteristic roots."""
        if self._max_root_modulus is None:
            poly = np.concatenate(([1.0], -self.recurrence[::-1]))
            roots = np.roots(poly)
            self._max_root_modulus = float(np.abs(roots).max()) if len(roots) else 0.0
        return self._max_root_modulus


def _diagonal_average(matrix: np.ndarray) -> np.ndarray:
    L, K = matrix.shape
    n = L + K - 1
    sums = np.zeros(n)
    counts = np.zeros(n)
    for i in range(L):
        sums[i:i + K] += matrix[i]
        counts[i:i + K] += 1.0
    return sums / counts


def ssa_fit(series, L: int | None = None, r: int | None = None) -> SsaModel:
    """Decompose an hourly series and keep the leading ``r`` components.

    Parameters
    ----------
    series : HourlySeries or 1-d array
    L : window length (default one week, or n//2 for short series)
    r : number of components; default is the smallest rank capturing 95%
        of the squared singular mass. Requests beyond the numerical rank
        are reduced with a RankDeficientWarning.
    """
    values, start_hour = _as_series_values(series)
    n = len(values)
    if L is None:
        L = default_window_length(n)
    if L < 2:
        raise TooShort(f"window length {L} is too small (need >= 2)")
    if n < 2 * L:
        raise TooShort(f"series of {n} hours is too short for window {L} "
                       f"(need >= {2 * L})")

    K = n - L + 1
    trajectory = np.lib.stride_tricks.sliding_window_view(values, L).T  # (L, K)
    u, s, vt = np.linalg.svd(trajectory, full_matrices=False)

    tol = s[0] * max(L, K) * np.finfo(np.float64).eps if s[0] > 0 else 0.0
    num_rank = int((s > tol).sum())
    if num_rank == 0:
        raise DomainError("series is identically zero; nothing to fit")

    rank_reduced = False
    if r is None:
        energy = np.cumsum(s ** 2) / float((s ** 2).sum())
        r = int(np.searchsorted(energy, RANK_ENERGY_TARGET) + 1)
        r = min(r, num_rank)
    else:
        if r < 1 or r >= L:
            raise DomainError(f"rank must satisfy 1 <= r < L, got r={r}, L={L}")
        if r > num_rank:
            warnings.warn(f"requested rank {r} exceeds numerical rank {num_rank}; "
                          "reduced", RankDeficientWarning)
            r = num_rank
            rank_reduced = True

    # drop trailing components while the last-coordinate projection is
    # degenerate (forecast recurrence undefined at verticality 1)
    while r > 0:
        pi = u[L - 1, :r]
        nu2 = float(pi @ pi)
        if nu2 < 1.0 - 1.0e-10:
            break
        warnings.warn(f"signal subspace at rank {r} is vertical; reduced",
                      RankDeficientWarning)
        r -= 1
        rank_reduced = True
    if r == 0:
        raise DomainError("no usable components: signal subspace is vertical")

    head = u[:L - 1, :r]
    recurrence = head @ pi / (1.0 - nu2)  # x[t] = recurrence . x[t-L+1 : t]

    low_rank = (u[:, :r] * s[:r]) @ vt[:r]
    reconstructed = _diagonal_average(low_rank)
    return SsaModel(window=L, rank=r, singular_values=s, recurrence=recurrence,
                    reconstructed=reconstructed, start_hour=start_hour,
                    rank_reduced=rank_reduced, verticality=nu2)


def ssa_forecast(model: SsaModel, horizon: int) -> np.ndarray:
    """Continue the reconstructed series ``horizon`` hours ahead by applying
    the linear recurrence. Deterministic; an explosive recurrence root is
    flagged with UnstableRecurrenceWarning but the forecast is still returned.
    """
    if horizon < 0:
        raise DomainError("horizon must be non-negative")
    if model.max_root_modulus() > 1.0 + 1.0e-6:
        warnings.warn(f"recurrence root modulus {model.max_root_modulus():.6f} "
                      "exceeds 1; forecast may diverge", UnstableRecurrenceWarning)
    lag = model.window - 1
    buf = list(model.reconstructed[-lag:])
    coeffs = model.recurrence
    out = np.empty(horizon)
    for t in range(horizon):
        nxt = float(np.dot(coeffs, buf))
        out[t] = nxt
        buf.pop(0)
        buf.append(nxt)
    return out


@dataclass
class VirtualClock:
    """Cumulative-intensity time transform evaluated at hour boundaries."""

    start_hour: int
    breakpoints: np.ndarray = field(repr=False)  # length n_hours + 1, non-decreasing

    @property
    def n_hours(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def total_mass(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def domain_seconds(self) -> tuple[int, int]:
        t0 = self.start_hour * SECONDS_PER_HOUR
        return t0, t0 + self.n_hours * SECONDS_PER_HOUR

    def cumulative(self, timestamps) -> np.ndarray:
        """Piecewise-linear cumulative intensity at epoch-second timestamps."""
        ts = np.asarray(timestamps, dtype=np.float64)
        hours = ts / SECONDS_PER_HOUR - self.start_hour
        if ((hours < 0) | (hours > self.n_hours)).any():
            raise OutOfDomain("timestamp outside the clock's window")
        return np.interp(hours, np.arange(self.n_hours + 1), self.breakpoints)


def build_virtual_clock(intensity, start_hour: int | None = None) -> VirtualClock:
    """Build the virtual clock from hourly intensities (counts or forecasts).

    The cumulative intensity is piecewise linear through the hourly sums;
    zero-intensity hours collapse to flat segments.
    """
    values, series_start = _as_series_values(intensity)
    if (values < 0).any():
        raise DomainError("intensities must be non-negative")
    total = float(values.sum())
    if total <= 0.0:
        raise ZeroTotal("total intensity must be positive")
    breakpoints = np.concatenate(([0.0], np.cumsum(values)))
    return VirtualClock(start_hour=series_start if start_hour is None else start_hour,
                        breakpoints=breakpoints)


def virtualize(clock: VirtualClock, timestamps) -> np.ndarray:
    """Map event timestamps to virtual seconds.

    u = T_virtual * cum(t) / cum(T) with T_virtual the window length, so one
    virtual hour carries ~1/n_hours of the total event mass. Monotone
    non-decreasing, strictly increasing where intensity is positive.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        return np.empty(0)
    t_virtual = clock.n_hours * SECONDS_PER_HOUR
    return t_virtual * clock.cumulative(ts) / clock.total_mass


@dataclass(frozen=True)
class AlarmConfig:
    """Run-length alarm rule: ``consecutive_hours`` deviations beyond
    ``sigma_multiplier`` residual sigmas."""

    sigma_multiplier: float = 3.0
    consecutive_hours: int = 2
    residual_window: int = 168

    def __post_init__(self):
        if self.sigma_multiplier <= 0:
            raise DomainError("sigma_multiplier must be positive")
        if self.consecutive_hours < 1:
            raise DomainError("consecutive_hours must be at least 1")
        if self.residual_window < 10:
            raise DomainError("residual_window must be at least 10")


@dataclass(frozen=True)
class AlarmReport:
    alarm_hour: int | None
    sigma: float
    hours_checked: int
    exceedances: tuple[int, ...] = ()

    @property
    def fired(self) -> bool:
        return self.alarm_hour is not None


def check_alarm(actual, forecast, config: AlarmConfig = AlarmConfig()) -> AlarmReport:
    """Scan |actual - forecast| for the first run of ``consecutive_hours``
    hours beyond ``sigma_multiplier`` times the trailing in-control sigma.

    The first ``residual_window`` hours are burn-in that seeds the sigma
    estimate; flagged hours never enter the trailing window.
    """
    actual_values, _ = _as_series_values(actual)
    forecast_values = np.asarray(forecast, dtype=np.float64)
    if len(actual_values) != len(forecast_values):
        raise DimensionMismatch(f"actual has {len(actual_values)} hours, "
                                f"forecast {len(forecast_values)}")
    residuals = actual_values - forecast_values
    window: deque[float] = deque(maxlen=config.residual_window)
    run = 0
    sigma = 0.0
    exceedances: list[int] = []
    for t, e in enumerate(residuals):
        if len(window) < config.residual_window:
            window.append(e)
            continue
        sigma = float(np.std(np.fromiter(window, dtype=np.float64), ddof=1))
        if abs(e) > config.sigma_multiplier * sigma:
            exceedances.append(t)
            run += 1
            if run >= config.consecutive_hours:
                return AlarmReport(alarm_hour=t, sigma=sigma, hours_checked=t + 1,
                                   exceedances=tuple(exceedances))
        else:
            run = 0
            window.append(e)
    return AlarmReport(alarm_hour=None, sigma=sigma, hours_checked=len(residuals),
                       exceedances=tuple(exceedances))
