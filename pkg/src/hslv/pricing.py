"""Heston characteristic function, Fourier-cosine call pricing, Black-Scholes
pricing and implied-volatility inversion, and the market call surface."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RectBivariateSpline, make_interp_spline
from scipy.special import ndtr

from .variance import CirParams

__all__ = [
    "CallSurface",
    "CosConfig",
    "DomainTruncationWarning",
    "HestonParams",
    "ImpliedVolBandError",
    "SurfaceArbitrageError",
    "bs_call_price",
    "bs_vega",
    "build_market_surface",
    "cos_call_price",
    "cos_call_prices",
    "default_strikes",
    "DEFAULT_MATURITIES",
    "check_static_arbitrage",
    "heston_char_fn",
    "implied_vol",
    "read_surface",
    "write_surface",
]


@dataclass(frozen=True)
class HestonParams:
    cir: CirParams
    rho: float
    r: float = 0.0
    s0: float = 1.0

    def __post_init__(self) -> None:
        if not abs(self.rho) < 1:
            raise ValueError(f"correlation must lie in (-1, 1), got {self.rho}")
        if not self.s0 > 0:
            raise ValueError("spot must be positive")

    @classmethod
    def from_values(cls, *, kappa, theta, gamma, v0, rho, r=0.0, s0=1.0) -> "HestonParams":
        return cls(CirParams(kappa, theta, gamma, v0), rho, r, s0)

    @property
    def kappa(self) -> float:
        return self.cir.kappa

    @property
    def theta(self) -> float:
        return self.cir.theta

    @property
    def gamma(self) -> float:
        return self.cir.gamma

    @property
    def v0(self) -> float:
        return self.cir.v0


@dataclass(frozen=True)
class CosConfig:
    n_terms: int = 1024
    domain_width: float = 24.0

    def __post_init__(self) -> None:
        if self.n_terms < 32:
            raise ValueError("COS expansion needs at least 32 terms")
        if self.domain_width < 10:
            raise ValueError("COS domain must cover at least 10 standard deviations")


class DomainTruncationWarning(RuntimeWarning):
    pass


class ImpliedVolBandError(ValueError):
    """Price outside the no-arbitrage band ``((s - K e^{-rT})+, s)``."""


class SurfaceArbitrageError(ValueError):
    def __init__(self, message: str, cell: tuple[int, int]):
        super().__init__(f"{message} at grid cell (t index {cell[0]}, K index {cell[1]})")
        self.cell = cell


# ---------------------------------------------------------------------------
# Characteristic function


def _log1p_ratio(z: np.ndarray) -> np.ndarray:
    """``log(1 + z) / z`` for complex ``z``, accurate near zero."""
    small = np.abs(z) < 1e-4
    zs = np.where(small, z, 0.0)
    series = 1 - zs / 2 + zs ** 2 / 3 - zs ** 3 / 4 + zs ** 4 / 5
    zl = np.where(small, 1.0, z)
    return np.where(small, series, np.log1p(zl) / zl)


def heston_char_fn(u, t: float, params: HestonParams):
    """``E[exp(i u log S_t)]`` under the risk-neutral Heston law.

    Written in the rotation-free form with ``g = (beta - d) / (beta + d)`` so the
    complex logarithm stays on its principal branch; every factor of
    ``1/gamma**2`` is cancelled analytically so the small-vol-of-vol limit is
    stable.
    """
    u = np.asarray(u, dtype=complex)
    kappa, theta, gamma, v0 = params.kappa, params.theta, params.gamma, params.v0
    iu = 1j * u
    beta = kappa - params.rho * gamma * iu
    q = iu + u * u
    d = np.sqrt(beta * beta + gamma * gamma * q)
    # (beta - d) / gamma^2 without cancellation
    bmd_g2 = -q / (beta + d)
    g = gamma * gamma * bmd_g2 / (beta + d)
    e = np.exp(-d * t)
    one_m_e = -np.expm1(-d * t)
    D = bmd_g2 * one_m_e / (1 - g * e)
    # log((1 - g e) / (1 - g)) / gamma^2 = log1p(z) / gamma^2, z = g(1-e)/(1-g)
    z_g2 = bmd_g2 / (beta + d) * one_m_e / (1 - g)
    log_term_g2 = z_g2 * _log1p_ratio(gamma * gamma * z_g2)
    C = iu * params.r * t + kappa * theta * (bmd_g2 * t - 2.0 * log_term_g2)
    out = np.exp(iu * math.log(params.s0) + C + D * v0)
    if not np.all(np.isfinite(out)):
        warnings.warn("non-finite characteristic function value", RuntimeWarning, stacklevel=2)
    return out


def _log_price_cumulants(T: float, params: HestonParams) -> tuple[float, float]:
    """Mean and variance of ``log(S_T / s0)`` from the characteristic function."""
    h = 1e-3
    shifted = HestonParams(params.cir, params.rho, params.r, 1.0)
    lp = np.log(heston_char_fn(np.array([-h, h]), T, shifted))
    c1 = float(np.imag(lp[1] - lp[0]) / (2 * h))
    c2 = float(-np.real(lp[1] + lp[0]) / (h * h))
    return c1, max(c2, 1e-12)


# ---------------------------------------------------------------------------
# COS pricing


def cos_call_prices(params: HestonParams, strikes, T: float, cfg: CosConfig = CosConfig()) -> np.ndarray:
    """European calls for several strikes at one maturity.

    Puts are expanded in cosines over a cumulant-sized interval and calls
    recovered by put-call parity, which keeps the truncation error bounded.
    """
    K = np.atleast_1d(np.asarray(strikes, dtype=float))
    if np.any(K <= 0) or not T > 0:
        raise ValueError("need K > 0 and T > 0")
    c1, c2 = _log_price_cumulants(T, params)
    half = cfg.domain_width * math.sqrt(c2)
    x0 = np.log(params.s0 / K)
    a = c1 - half
    b = c1 + half
    k = np.arange(cfg.n_terms)
    unit = HestonParams(params.cir, params.rho, params.r, 1.0)
    cf = heston_char_fn(k * np.pi / (b - a), T, unit)
    # x = log(S_T / s0); the put pays K (1 - e^{x - m})+ with m = log(K / s0)
    m = -x0
    upper = np.minimum(b, m)
    weights = np.ones(cfg.n_terms)
    weights[0] = 0.5
    terms = np.real(cf[:, None] * np.exp(-1j * k[:, None] * np.pi * a / (b - a)))
    vk = _cos_put_coefficients_shifted(k, a, b, upper, m)
    put = np.exp(-params.r * T) * K * np.sum(weights[:, None] * terms * vk, axis=0)
    put = np.where(upper <= a, 0.0, put)
    _check_density_tails(cf, k, a, b)
    return put + params.s0 - K * np.exp(-params.r * T)


def _cos_put_coefficients_shifted(k, a, b, upper, m):
    """Coefficients of ``(1 - e^{x - m})`` on ``[a, upper]`` in the ``x`` variable."""
    w = k[:, None] * np.pi / (b - a)
    d = upper[None, :]
    em = np.exp(-m)[None, :]
    chi = (np.cos(w * (d - a)) * np.exp(d) - np.exp(a)
           + w * np.sin(w * (d - a)) * np.exp(d)) / (1 + w * w)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(w == 0, d - a, np.sin(w * (d - a)) / np.where(w == 0, 1, w))
    return 2.0 / (b - a) * (psi - em * chi)


def _check_density_tails(cf, k, a, b, tol=1e-6) -> None:
    # density times interval width bounds the price error from the cut tails
    w = np.ones(k.size)
    w[0] = 0.5
    for x in (a, b):
        f = 2.0 / (b - a) * np.sum(w * np.real(cf * np.exp(-1j * k * np.pi * a / (b - a)))
                                   * np.cos(k * np.pi * (x - a) / (b - a)))
        if abs(f) * (b - a) > tol:
            warnings.warn(f"COS domain truncation: density {f:.3g} at interval edge {x:.3g}",
                          DomainTruncationWarning, stacklevel=3)


def cos_call_price(params: HestonParams, K: float, T: float, cfg: CosConfig = CosConfig()) -> float:
    """Single European call price by the Fourier-cosine expansion."""
    return float(cos_call_prices(params, [K], T, cfg)[0])


# ---------------------------------------------------------------------------
# Black-Scholes


def bs_call_price(s, K, T, r, sigma):
    """Black-Scholes call; ``sigma -> 0`` or ``T -> 0`` give the discounted intrinsic value."""
    s, K, T, r, sigma = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (s, K, T, r, sigma)))
    disc = np.exp(-r * T)
    sd = sigma * np.sqrt(T)
    pos = sd > 0
    sd_safe = np.where(pos, sd, 1.0)
    d1 = (np.log(s / K) + r * T) / sd_safe + 0.5 * sd_safe
    d2 = d1 - sd_safe
    price = np.where(pos, s * ndtr(d1) - K * disc * ndtr(d2), np.maximum(s - K * disc, 0.0))
    return float(price) if price.ndim == 0 else price


def bs_vega(s, K, T, r, sigma):
    sd = sigma * np.sqrt(T)
    d1 = (np.log(s / K) + r * T) / sd + 0.5 * sd
    out = s * np.sqrt(T) * np.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi)
    return float(out) if np.ndim(out) == 0 else out


def implied_vol(price: float, s: float, K: float, T: float, r: float,
                tol: float = 1e-13, max_iter: int = 200) -> float:
    """Black-Scholes implied volatility by bracketing plus safeguarded Newton.

    Raises :class:`ImpliedVolBandError` for prices outside
    ``((s - K e^{-rT})+, s)``.
    """
    lower = max(s - K * math.exp(-r * T), 0.0)
    if not (lower < price < s):
        raise ImpliedVolBandError(
            f"price {price!r} outside no-arbitrage band ({lower!r}, {s!r}) for K={K}, T={T}")
    lo, hi = 0.0, 1.0
    while bs_call_price(s, K, T, r, hi) < price:
        lo, hi = hi, 2 * hi
        if hi > 1e4:
            raise ImpliedVolBandError(f"implied vol above {hi} for price {price!r}")
    # Newton from an interior point, falling back to bisection
    x = 0.5 * (lo + hi) if lo > 0 else min(hi, max(math.sqrt(2 * abs(math.log(s / K) + r * T) / T), 0.2))
    for _ in range(max_iter):
        f = bs_call_price(s, K, T, r, x) - price
        if abs(f) <= tol * max(price, 1e-300) or hi - lo <= 1e-15 * max(1.0, hi):
            return x
        if f > 0:
            hi = x
        else:
            lo = x
        v = bs_vega(s, K, T, r, x) if x > 0 else 0.0
        nxt = x - f / v if v > 0 else lo - 1.0
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        x = nxt
    return x


# ---------------------------------------------------------------------------
# Call surface


@dataclass
class CallSurface:
    """Call prices on a (maturity, strike) grid with a smooth evaluator.

    Off-grid prices interpolate total implied variance ``w = iv^2 t`` with a
    bicubic spline in ``(t, log K)`` (lower degree on short grids; a single
    maturity gives a spline in ``log K`` only). Outside the strike range ``w``
    is held flat in ``K``; outside the maturity range the implied vol is held
    flat (``w`` proportional to ``t``).
    """

    maturities: np.ndarray
    strikes: np.ndarray
    prices: np.ndarray
    s0: float = 1.0
    r: float = 0.0
    check: bool = True
    _spline: object = field(init=False, repr=False)
    total_variance: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.maturities = np.asarray(self.maturities, dtype=float)
        self.strikes = np.asarray(self.strikes, dtype=float)
        self.prices = np.asarray(self.prices, dtype=float)
        if self.prices.shape != (self.maturities.size, self.strikes.size):
            raise ValueError("price matrix shape does not match the grid")
        if np.any(np.diff(self.maturities) <= 0) or np.any(np.diff(self.strikes) <= 0):
            raise ValueError("grids must be strictly increasing")
        if self.check:
            check_static_arbitrage(self.maturities, self.strikes, self.prices, self.s0, self.r)
        self.total_variance = self._node_total_variance()
        logk = np.log(self.strikes)
        ky = min(3, self.strikes.size - 1)
        if self.strikes.size < 2:
            raise ValueError("need at least two strikes")
        if self.maturities.size == 1:
            self._spline = make_interp_spline(logk, self.total_variance[0], k=ky)
        else:
            kx = min(3, self.maturities.size - 1)
            self._spline = RectBivariateSpline(self.maturities, logk, self.total_variance,
                                               kx=kx, ky=ky, s=0)

    def _node_total_variance(self) -> np.ndarray:
        """Implied total variance per node; wing nodes whose time value is too
        small to invert reliably take the nearest valid value in the row."""
        w = np.full(self.prices.shape, np.nan)
        for i, t in enumerate(self.maturities):
            for j, K in enumerate(self.strikes):
                c = self.prices[i, j]
                lower = max(self.s0 - K * math.exp(-self.r * t), 0.0)
                if c - lower > 1e-12 * self.s0 and c < self.s0:
                    try:
                        w[i, j] = implied_vol(c, self.s0, K, t, self.r) ** 2 * t
                    except ImpliedVolBandError:
                        pass
            row = w[i]
            ok = np.flatnonzero(np.isfinite(row))
            if ok.size == 0:
                raise SurfaceArbitrageError("no invertible price in maturity row", (i, 0))
            row[: ok[0]] = row[ok[0]]
            row[ok[-1] + 1:] = row[ok[-1]]
            for j in np.flatnonzero(~np.isfinite(row)):
                row[j] = row[ok[np.argmin(np.abs(ok - j))]]
        return w

    def total_variance_at(self, t, K) -> np.ndarray:
        t, K = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(K, dtype=float))
        t0, t1 = self.maturities[0], self.maturities[-1]
        x = np.log(np.clip(K, self.strikes[0], self.strikes[-1]))
        tc = np.clip(t, t0, t1)
        if self.maturities.size == 1:
            w = self._spline(x)
        else:
            w = self._spline.ev(tc, x)
        scale = np.where(t < t0, t / t0, np.where(t > t1, t / t1, 1.0))
        return np.maximum(w * scale, 0.0)

    def implied_vol_at(self, t, K):
        t = np.asarray(t, dtype=float)
        w = self.total_variance_at(t, K)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.sqrt(np.where(t > 0, w / t, 0.0))

    def price(self, t, K):
        """Call price at arbitrary ``(t, K)``; ``t = 0`` gives intrinsic value."""
        t = np.asarray(t, dtype=float)
        return bs_call_price(self.s0, K, t, self.r, self.implied_vol_at(t, K))


def check_static_arbitrage(maturities, strikes, prices, s0, r, slack=1e-8) -> None:
    """Monotone and convex in K, nondecreasing in T, within price bounds."""
    for i, t in enumerate(maturities):
        row = prices[i]
        lower = np.maximum(s0 - strikes * math.exp(-r * t), 0.0)
        bad = np.flatnonzero((row < lower - slack) | (row > s0 + slack) | ~np.isfinite(row))
        if bad.size:
            raise SurfaceArbitrageError("price outside no-arbitrage bounds", (i, int(bad[0])))
        dec = np.flatnonzero(np.diff(row) > slack)
        if dec.size:
            raise SurfaceArbitrageError("price increasing in strike", (i, int(dec[0]) + 1))
        slopes = np.diff(row) / np.diff(strikes)
        cvx = np.flatnonzero(np.diff(slopes) * np.diff(strikes)[1:] < -slack)
        if cvx.size:
            raise SurfaceArbitrageError("price not convex in strike", (i, int(cvx[0]) + 1))
    if r >= 0:
        cal = np.argwhere(np.diff(prices, axis=0) < -slack)
        if cal.size:
            i, j = cal[0]
            raise SurfaceArbitrageError("price decreasing in maturity", (int(i) + 1, int(j)))


DEFAULT_MATURITIES = (0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0)


def default_strikes(n: int = 60, k_min: float = 0.3, k_max: float = 3.0) -> np.ndarray:
    return np.geomspace(k_min, k_max, n)


def build_market_surface(params: HestonParams, maturities=DEFAULT_MATURITIES, strikes=None,
                         cfg: CosConfig = CosConfig()) -> CallSurface:
    """Price the Heston "market" on a grid and wrap it as a :class:`CallSurface`."""
    maturities = np.asarray(maturities, dtype=float)
    strikes = default_strikes() if strikes is None else np.asarray(strikes, dtype=float)
    if np.any(np.diff(maturities) <= 0) or np.any(np.diff(strikes) <= 0):
        raise ValueError("grids must be strictly increasing")
    if maturities[0] <= 0:
        raise ValueError("maturities must be positive")
    prices = np.vstack([cos_call_prices(params, strikes, t, cfg) for t in maturities])
    return CallSurface(maturities, strikes, prices, params.s0, params.r)


def write_surface(surface: CallSurface, path: str | Path) -> None:
    """Text table ``t,K,price`` with 17 significant digits."""
    lines = ["t,K,price"]
    for i, t in enumerate(surface.maturities):
        for j, K in enumerate(surface.strikes):
            lines.append(f"{t:.17g},{K:.17g},{surface.prices[i, j]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_surface(path: str | Path, s0: float = 1.0, r: float = 0.0) -> CallSurface:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0].strip() != "t,K,price":
        raise ValueError(f"{path}: expected header 't,K,price'")
    data = np.array([[float(x) for x in row.split(",")] for row in rows[1:] if row.strip()])
    ts = np.unique(data[:, 0])
    ks = np.unique(data[:, 1])
    prices = np.full((ts.size, ks.size), np.nan)
    prices[np.searchsorted(ts, data[:, 0]), np.searchsorted(ks, data[:, 1])] = data[:, 2]
    if np.isnan(prices).any():
        raise ValueError(f"{path}: surface grid is incomplete")
    return CallSurface(ts, ks, prices, s0, r)
