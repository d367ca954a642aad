"""Sharp-wave ripple detection from LFP and replay/ripple cross-correlograms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import signal, stats

from .errors import ConfigError, DataError

__all__ = ["SwrEvent", "Correlogram", "bandpass", "detect_swr", "cross_correlogram"]


@dataclass(frozen=True)
class SwrEvent:
    """A ripple: peak time, interval bounds (s) and peak filtered amplitude (uV)."""

    peak_time: float
    start_time: float
    end_time: float
    peak_amplitude: float

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time


def bandpass(lfp: np.ndarray, rate: float, band=(120.0, 250.0), order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass (second-order sections run forward and back)."""
    lo, hi = band
    if not 0 < lo < hi < rate / 2:
        raise ConfigError("pass band must lie strictly inside (0, rate / 2)")
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=rate, output="sos")
    try:
        return signal.sosfiltfilt(sos, np.asarray(lfp, dtype=float))
    except ValueError as exc:
        raise DataError(f"trace too short for the filter: {exc}") from exc


def _runs(mask: np.ndarray) -> np.ndarray:
    """``(n, 2)`` start and stop (exclusive) sample indices of True runs."""
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return np.column_stack([np.flatnonzero(d == 1), np.flatnonzero(d == -1)])


def detect_swr(lfp, rate: float, band=(120.0, 250.0), n_sd: float = 3.5,
               min_duration: float = 0.03, max_duration: float = 0.5,
               min_amplitude: float = 20.0, max_amplitude: float = 800.0,
               merge_gap: float = 0.05, t0: float = 0.0, order: int = 4) -> list:
    """Ripple events in a uniformly sampled LFP trace.

    The envelope is the rectified band-passed signal. Samples above
    ``mean + n_sd * sd`` of the whole-trace envelope form candidate intervals;
    intervals closer than ``merge_gap`` are merged, then duration and peak
    amplitude bounds are applied.

    Parameters
    ----------
    lfp : array_like
        Trace in microvolts.
    rate : float
        Sampling rate (Hz), above 500.
    t0 : float
        Time of the first sample (s).

    Returns
    -------
    list of SwrEvent
    """
    if not rate > 500:
        raise ConfigError("sampling rate must exceed 500 Hz")
    x = np.asarray(lfp, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise DataError("LFP contains non-finite samples")
    env = np.abs(bandpass(x, rate, band, order))
    sd = env.std()
    if sd <= 0:
        return []
    runs = _runs(env > env.mean() + n_sd * sd)
    if runs.size == 0:
        return []
    gap = int(np.ceil(merge_gap * rate))
    merged = [list(runs[0])]
    for s, e in runs[1:]:
        if s - merged[-1][1] < gap:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    out = []
    for s, e in merged:
        dur = (e - s) / rate
        peak = s + int(np.argmax(env[s:e]))
        amp = float(env[peak])
        if min_duration <= dur <= max_duration and min_amplitude <= amp <= max_amplitude:
            out.append(SwrEvent(t0 + peak / rate, t0 + s / rate, t0 + e / rate, amp))
    return out


@dataclass(frozen=True, eq=False)
class Correlogram:
    """Cross-correlogram of replay times against ripple times.

    Attributes
    ----------
    lags : ndarray
        Bin centres ``u`` (s); bin ``u`` counts lags in ``(u - tau/2, u + tau/2)``.
    tau : float
    counts : ndarray
        Ordered pair counts ``J(u)``.
    rho : ndarray
        ``J(u) / (tau * duration)``.
    level : float or None
        Product density under independence.
    half_width : float or None
        Half-width of the band on the square-root scale.
    alpha : float
        Per-bin level after the Bonferroni division.
    """

    lags: np.ndarray
    tau: float
    counts: np.ndarray
    rho: np.ndarray
    level: Optional[float]
    half_width: Optional[float]
    alpha: float

    @property
    def sqrt_rho(self) -> np.ndarray:
        return np.sqrt(self.rho)

    @property
    def lo(self) -> Optional[float]:
        return None if self.level is None else float(np.sqrt(self.level) - self.half_width)

    @property
    def hi(self) -> Optional[float]:
        return None if self.level is None else float(np.sqrt(self.level) + self.half_width)

    def breaches(self) -> np.ndarray:
        """Bins whose square-root density lies outside the band."""
        if self.level is None:
            return np.zeros(self.lags.size, dtype=bool)
        return (self.sqrt_rho < self.lo) | (self.sqrt_rho > self.hi)

    def rows(self):
        for u, j, r, s in zip(self.lags, self.counts, self.rho, self.sqrt_rho):
            yield float(u), int(j), float(r), float(s), self.level, self.lo, self.hi


def cross_correlogram(rep_times, rip_times, tau: float = 0.25, max_lag: float = 5.0,
                      duration: float = 1.0, alpha: float = 0.05) -> Correlogram:
    """Second-order product density estimate at lags ``t_rep - t_rip``.

    Bin centres are ``k * tau`` for ``|k| <= round(max_lag / tau)``. Pairs
    with exactly equal times and lags falling exactly on a bin edge are not
    counted.
    """
    if not tau > 0 or not max_lag > 0 or not duration > 0:
        raise ConfigError("tau, max_lag and duration must be positive")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    rep = np.sort(np.asarray(rep_times, dtype=float).ravel())
    rip = np.sort(np.asarray(rip_times, dtype=float).ravel())
    for arr in (rep, rip):
        if arr.size and (arr[0] < 0 or arr[-1] > duration):
            raise DataError("event times must lie in [0, duration]")
    Kb = int(round(max_lag / tau))
    lags = np.arange(-Kb, Kb + 1) * tau
    nb = lags.size
    counts = np.zeros(nb, dtype=np.int64)
    reach = (Kb + 0.5) * tau
    if rep.size and rip.size:
        lo = np.searchsorted(rip, rep - reach, side="left")
        hi = np.searchsorted(rip, rep + reach, side="right")
        n = hi - lo
        owner = np.repeat(np.arange(rep.size), n)
        offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        d = rep[owner] - rip[lo[owner] + offs]
        pos = (d + 0.5 * tau) / tau + Kb
        k = np.floor(pos)
        ok = (d != 0) & (pos != k) & (k >= 0) & (k < nb)
        counts = np.bincount(k[ok].astype(np.int64), minlength=nb)
    rho = counts / (tau * duration)
    a_b = alpha / nb
    if rep.size == 0 or rip.size == 0:
        return Correlogram(lags, tau, counts, rho, None, None, a_b)
    level = rep.size * rip.size / duration ** 2
    hw = float(stats.norm.ppf(1 - a_b / 2) / np.sqrt(4 * duration * tau))
    return Correlogram(lags, tau, counts, rho, float(level), hw, a_b)
