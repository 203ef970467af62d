"""Dupire local variance, binned conditional expectation E[V | S], and the
squared leverage ``sigma_LV^2(t, S) / E[V_t | S_t = S]``."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pricing import CallSurface

__all__ = [
    "BinSpec",
    "ConditionalExpectationEstimate",
    "DupireConfig",
    "ExtrapolationError",
    "LeverageConfig",
    "LeverageEvaluation",
    "dupire_local_variance",
    "estimate_conditional_expectation",
    "leverage_squared",
    "write_condexp_trace",
]


class ExtrapolationError(ValueError):
    """Query outside the strike span of the call surface."""


@dataclass(frozen=True)
class DupireConfig:
    dt_bump: float = 0.01
    dk_bump_rel: float = 0.01
    denom_floor: float = 1e-6
    lv_floor: float = 1e-4
    lv_cap: float = 4.0

    def __post_init__(self) -> None:
        if min(self.dt_bump, self.dk_bump_rel, self.denom_floor, self.lv_floor, self.lv_cap) <= 0:
            raise ValueError("Dupire guards must be positive")
        if not self.lv_floor < self.lv_cap:
            raise ValueError("lv_floor must be below lv_cap")


@dataclass(frozen=True)
class BinSpec:
    n_bins: int = 20

    def __post_init__(self) -> None:
        if self.n_bins < 2:
            raise ValueError("need at least two bins")


@dataclass(frozen=True)
class LeverageConfig:
    """Floors and caps applied when forming the squared leverage."""

    eps_v: float = 1e-4
    lev_floor: float = 1e-2
    lev_cap: float = 25.0

    def __post_init__(self) -> None:
        if not (self.eps_v > 0 and 0 <= self.lev_floor < self.lev_cap):
            raise ValueError("invalid leverage guards")


def dupire_local_variance(surface: CallSurface, t, S, cfg: DupireConfig = DupireConfig()):
    """Local variance by finite differences on the call surface.

    ``(dC/dt + r S dC/dS) / max(S^2/2 * d2C/dS2, denom_floor)``, clamped to
    ``[lv_floor, lv_cap]``. Time derivatives are central with bump
    ``dt_bump``, forward when ``t < dt_bump`` and backward within ``dt_bump`` of
    the last maturity; ``t <= 0`` is evaluated at
    ``t = dt_bump`` as the right limit. Strike derivatives are central with bump
    ``dk_bump_rel * S``.
    """
    S = np.asarray(S, dtype=float)
    kmin, kmax = surface.strikes[0], surface.strikes[-1]
    if np.any((S < kmin) | (S > kmax)):
        raise ExtrapolationError(f"spot outside surface strike span [{kmin}, {kmax}]")
    t = float(t)
    dt = cfg.dt_bump
    if t <= 0:
        t = dt
    t_last = surface.maturities[-1]
    if t < dt:
        dcdt = (surface.price(t + dt, S) - surface.price(t, S)) / dt
    elif t + dt > t_last and t <= t_last:
        # a central difference would reach into the flat-vol extrapolation
        dcdt = (surface.price(t, S) - surface.price(t - dt, S)) / dt
    else:
        dcdt = (surface.price(t + dt, S) - surface.price(t - dt, S)) / (2 * dt)
    dk = cfg.dk_bump_rel * S
    c_up = surface.price(t, S + dk)
    c_mid = surface.price(t, S)
    c_dn = surface.price(t, S - dk)
    dcdk = (c_up - c_dn) / (2 * dk)
    d2cdk2 = (c_up - 2 * c_mid + c_dn) / (dk * dk)
    num = dcdt + surface.r * S * dcdk
    den = np.maximum(0.5 * S * S * d2cdk2, cfg.denom_floor)
    lv = np.clip(num / den, cfg.lv_floor, cfg.lv_cap)
    return float(lv) if lv.ndim == 0 else lv


@dataclass
class ConditionalExpectationEstimate:
    """Piecewise-constant estimate of ``E[V | S]`` over equal-count bins.

    ``bin_edges`` has ``n_bins + 1`` entries: the sample minimum, the
    midpoints between neighbouring bins, and the sample maximum. Queries
    outside the range fall into the nearest end bin.
    """

    bin_edges: np.ndarray
    bin_means: np.ndarray
    counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.bin_means.size

    def bin_index(self, S) -> np.ndarray:
        return np.searchsorted(self.bin_edges[1:-1], np.asarray(S, dtype=float), side="right")

    def __call__(self, S):
        out = self.bin_means[self.bin_index(S)]
        return float(out) if np.ndim(out) == 0 else out

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(self.bin_edges[i]), float(self.bin_edges[i + 1]), float(self.bin_means[i]))
                for i in range(self.n_bins)]


def estimate_conditional_expectation(S_samples, V_samples, spec: BinSpec = BinSpec()
                                     ) -> ConditionalExpectationEstimate:
    """Sort the cross-section by ``S``, split into ``n_bins`` groups whose sizes
    differ by at most one, and average ``V`` per group."""
    S = np.asarray(S_samples, dtype=float).ravel()
    V = np.asarray(V_samples, dtype=float).ravel()
    if S.size != V.size:
        raise ValueError("S and V samples differ in length")
    if S.size < spec.n_bins:
        raise ValueError(f"{S.size} samples cannot fill {spec.n_bins} bins")
    order = np.argsort(S, kind="stable")
    s_sorted, v_sorted = S[order], V[order]
    bounds = np.linspace(0, S.size, spec.n_bins + 1).round().astype(int)
    counts = np.diff(bounds)
    sums = np.add.reduceat(v_sorted, bounds[:-1])
    means = sums / counts
    edges = np.empty(spec.n_bins + 1)
    edges[0], edges[-1] = s_sorted[0], s_sorted[-1]
    edges[1:-1] = 0.5 * (s_sorted[bounds[1:-1] - 1] + s_sorted[bounds[1:-1]])
    return ConditionalExpectationEstimate(edges, means, counts)


@dataclass
class LeverageEvaluation:
    t: float
    sigma2: np.ndarray
    local_variance: np.ndarray
    cond_expectation: np.ndarray
    estimate: ConditionalExpectationEstimate | None = None


def leverage_squared(surface: CallSurface, t: float, S_paths, V_paths,
                     dupire: DupireConfig = DupireConfig(), bins: BinSpec = BinSpec(),
                     guards: LeverageConfig = LeverageConfig()) -> LeverageEvaluation:
    """Per-path squared leverage ``sigma_LV^2(t, S_j) / max(E[V | S = S_j], eps_v)``.

    A degenerate cross-section (``t = 0`` or all spots equal) uses the overall
    mean of ``V`` in place of the binned estimate. Spots outside the surface's
    strike span are clamped to the largest interval on which the strike
    stencil of the Dupire evaluation stays inside the span.
    """
    S = np.asarray(S_paths, dtype=float)
    V = np.asarray(V_paths, dtype=float)
    if t <= 0 or np.ptp(S) == 0:
        est = None
        cond = np.full(S.shape, V.mean())
    else:
        est = estimate_conditional_expectation(S, V, bins)
        cond = est.bin_means[est.bin_index(S)]
    lo = surface.strikes[0] / (1 - dupire.dk_bump_rel)
    hi = surface.strikes[-1] / (1 + dupire.dk_bump_rel)
    lv = dupire_local_variance(surface, t, np.clip(S, lo, hi), dupire)
    lv = np.broadcast_to(lv, S.shape)
    sigma2 = np.clip(lv / np.maximum(cond, guards.eps_v), guards.lev_floor, guards.lev_cap)
    return LeverageEvaluation(float(t), sigma2, lv, cond, est)


def write_condexp_trace(records, path: str | Path) -> None:
    """Write ``t,bin_lo,bin_hi,mean_v`` rows for ``(t, estimate)`` records."""
    lines = ["t,bin_lo,bin_hi,mean_v"]
    for t, est in records:
        for lo, hi, mv in est.rows():
            lines.append(f"{t:.17g},{lo:.17g},{hi:.17g},{mv:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
