"""Heston stochastic-local-volatility Monte Carlo.

Paths advance step-synchronously: at each time level the squared leverage is
calibrated over the whole cross-section, then every path takes one variance
step and one log-asset step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .kernel import LANE_W, LANE_W_TILDE, RandomStream, normals_block
from .localvol import BinSpec, DupireConfig, LeverageConfig, dupire_local_variance, leverage_squared
from .pricing import (CallSurface, HestonParams, ImpliedVolBandError, bs_vega, cos_call_price,
                      implied_vol)
from .variance import SchemeKind, TruncationSpec, VarianceIntegrator

__all__ = [
    "PathEnsemble",
    "PriceEstimate",
    "SimulationError",
    "SlvConfig",
    "TableCell",
    "advance_asset",
    "default_market",
    "derive_model_params",
    "error_table",
    "price_call",
    "simulate_hslv",
]

MARKET_DEFAULTS = dict(gamma=0.95, kappa=1.05, rho=-0.315, theta=0.0855, s0=1.0, r=0.0, v0=0.0945)
DEFAULT_N_GRID = (5, 10, 25, 40)
DEFAULT_STRIKES = (0.7, 1.0, 1.5)


class SimulationError(RuntimeError):
    def __init__(self, message: str, paths: np.ndarray):
        super().__init__(f"{message}; offending paths (first 10): {paths[:10].tolist()}")
        self.paths = paths


def default_market() -> HestonParams:
    m = MARKET_DEFAULTS
    return HestonParams.from_values(kappa=m["kappa"], theta=m["theta"], gamma=m["gamma"],
                                    v0=m["v0"], rho=m["rho"], r=m["r"], s0=m["s0"])


def derive_model_params(market: HestonParams, p: float) -> HestonParams:
    """Mis-specified model: gamma*(1-p), kappa*(1+p), rho*(1+p), theta*(1-p), v0*(1+p)."""
    rho = (1 + p) * market.rho
    if not abs(rho) < 1:
        raise ValueError(f"modification p={p} gives correlation {rho} outside (-1, 1)")
    return HestonParams.from_values(
        kappa=(1 + p) * market.kappa,
        theta=(1 - p) * market.theta,
        gamma=(1 - p) * market.gamma,
        v0=(1 + p) * market.v0,
        rho=rho,
        r=market.r,
        s0=market.s0,
    )


@dataclass
class SlvConfig:
    market: HestonParams
    model: HestonParams
    scheme: SchemeKind
    paths: int = 10_000
    steps: int = 40
    horizon: float = 5.0
    strikes: tuple[float, ...] = DEFAULT_STRIKES
    seed: int = 0
    p: float | None = None
    dupire: DupireConfig = field(default_factory=DupireConfig)
    bins: BinSpec = field(default_factory=BinSpec)
    leverage: LeverageConfig = field(default_factory=LeverageConfig)
    trunc: TruncationSpec | None = None
    backward_method: str = "closed"
    coupling: str = "noise"

    def __post_init__(self) -> None:
        self.scheme = SchemeKind(self.scheme)
        if self.coupling not in ("noise", "increment"):
            raise ValueError("coupling must be 'noise' or 'increment'")
        if self.paths < 100:
            raise ValueError("need at least 100 paths")
        if self.steps < 1:
            raise ValueError("need at least one step")
        if any(k <= 0 for k in self.strikes):
            raise ValueError("strikes must be positive")
        if self.trunc is None:
            self.trunc = TruncationSpec.default_for(self.model.cir)

    @classmethod
    def from_market(cls, market: HestonParams, p: float | None, scheme, **kw) -> "SlvConfig":
        model = market if p is None else derive_model_params(market, p)
        return cls(market=market, model=model, scheme=scheme, p=p, **kw)

    @property
    def tau(self) -> float:
        return self.horizon / self.steps


@dataclass
class PathEnsemble:
    R: np.ndarray
    V: np.ndarray
    step: int = 0
    t: float = 0.0

    @property
    def S(self) -> np.ndarray:
        return np.exp(self.R)


@dataclass(frozen=True)
class PriceEstimate:
    mean: float
    stderr: float
    n: int


def advance_asset(R_i, V_i, V_ip1, sigma_hat, dtau: float, Z, params: HestonParams):
    """One log-asset step with the variance integral eliminated.

    ``R + r tau - tau sigma^2 V_i / 2 + (rho/gamma) sigma (V_{i+1} - V_i - kappa theta tau
    + kappa tau V_i) + sqrt((1 - rho^2) tau sigma^2 V_i) Z``.
    """
    k, th, g, rho = params.kappa, params.theta, params.gamma, params.rho
    s2 = np.square(sigma_hat)
    return (R_i + params.r * dtau - 0.5 * dtau * s2 * V_i
            + (rho / g) * sigma_hat * (V_ip1 - V_i - k * th * dtau + k * dtau * V_i)
            + np.sqrt((1 - rho * rho) * dtau * s2 * V_i) * Z)


@dataclass
class StepTrace:
    t: float
    estimate: object
    sigma2_mean: float
    sigma2_min: float
    sigma2_max: float


def simulate_hslv(cfg: SlvConfig, surface: CallSurface | None, leverage: str | float = "calibrated",
                  trace: list | None = None, path_offset: int = 0) -> PathEnsemble:
    """Evolve ``cfg.paths`` paths to ``cfg.horizon``.

    ``leverage="calibrated"`` recomputes the squared leverage each step from the
    surface; a number fixes the leverage (not squared) to that constant for
    every path and step. If ``trace`` is a list, one :class:`StepTrace` per step
    is appended.
    """
    M, N, tau = cfg.paths, cfg.steps, cfg.tau
    model = cfg.model
    calibrated = isinstance(leverage, str)
    if calibrated and leverage != "calibrated":
        raise ValueError(f"unknown leverage mode {leverage!r}")
    if calibrated and surface is None:
        raise ValueError("calibrated leverage needs a call surface")
    ids = np.arange(path_offset, path_offset + M, dtype=np.uint64)
    streams = RandomStream(cfg.seed, ids)
    var = VarianceIntegrator(cfg.scheme, model.cir, M, tau, cfg.trunc, seed=cfg.seed,
                             path_ids=ids, backward_method=cfg.backward_method)
    # The substitution in advance_asset needs an increment consistent with the
    # CIR drift; the Lamperti and truncated schemes do not produce one.
    noise_coupled = cfg.coupling == "noise" and cfg.scheme is not SchemeKind.EXACT_NCX2
    R = np.full(M, math.log(model.s0))
    sd = math.sqrt(tau)
    lv0 = None
    for i in range(N):
        t = i * tau
        V_i = var.V_effective
        if calibrated:
            if i == 0:
                # single-atom cross-section: E[V | S = s0] = v0
                if lv0 is None:
                    lv0 = dupire_local_variance(surface, 0.0, min(max(model.s0, surface.strikes[0]),
                                                                  surface.strikes[-1]), cfg.dupire)
                s2 = np.clip(lv0 / max(model.v0, cfg.leverage.eps_v),
                             cfg.leverage.lev_floor, cfg.leverage.lev_cap)
                sigma2 = np.full(M, s2)
                est = None
            else:
                ev = leverage_squared(surface, t, np.exp(R), V_i, cfg.dupire, cfg.bins, cfg.leverage)
                sigma2, est = ev.sigma2, ev.estimate
            sigma = np.sqrt(sigma2)
            if trace is not None:
                trace.append(StepTrace(t, est, float(sigma2.mean()), float(sigma2.min()), float(sigma2.max())))
        else:
            sigma = float(leverage)
        dW = sd * normals_block(streams, LANE_W, i, 1)[0]
        Z = normals_block(streams, LANE_W_TILDE, i, 1)[0]
        V_next = var.step(dW)
        if noise_coupled:
            V_sub = V_i + model.kappa * (model.theta - V_i) * tau + model.gamma * np.sqrt(V_i) * dW
        else:
            V_sub = V_next
        R = advance_asset(R, V_i, V_sub, sigma, tau, Z, model)
        bad = ~np.isfinite(R) | ~np.isfinite(V_next)
        if bad.any():
            raise SimulationError(f"non-finite state at step {i + 1}", np.flatnonzero(bad))
    return PathEnsemble(R, var.V_effective.copy(), N, N * tau)


def price_call(ensemble: PathEnsemble, K: float, r: float, T: float) -> PriceEstimate:
    """Discounted payoff mean with standard error ``std / sqrt(M)`` (ddof=1)."""
    payoff = np.maximum(ensemble.S - K, 0.0)
    disc = math.exp(-r * T)
    n = payoff.size
    mean = disc * float(payoff.mean())
    stderr = disc * float(payoff.std(ddof=1)) / math.sqrt(n) if n >= 2 else float("nan")
    return PriceEstimate(mean, stderr, n)


@dataclass
class TableCell:
    scheme: SchemeKind
    N: int
    K: float
    err_pct: float
    stderr_pct: float
    price: float
    price_stderr: float
    market_price: float
    band_violation: bool = False
    seconds: float = 0.0


def market_reference(market: HestonParams, strikes, T: float) -> dict[float, tuple[float, float]]:
    """Market call price and implied vol per strike from the analytic pricer."""
    out = {}
    for K in strikes:
        c = cos_call_price(market, K, T)
        out[K] = (c, implied_vol(c, market.s0, K, T, market.r))
    return out


def score_cell(est: PriceEstimate, K: float, T: float, market: HestonParams,
               ref: tuple[float, float], metric: str = "iv") -> tuple[float, float, bool]:
    """Error and its standard error, both multiplied by 100."""
    c_mkt, iv_mkt = ref
    if metric == "price":
        return 100 * abs(est.mean - c_mkt), 100 * est.stderr, False
    if metric != "iv":
        raise ValueError(f"unknown error metric {metric!r}")
    vega = bs_vega(market.s0, K, T, market.r, iv_mkt)
    try:
        iv = implied_vol(est.mean, market.s0, K, T, market.r)
    except ImpliedVolBandError:
        return float("nan"), 100 * est.stderr / vega, True
    return 100 * abs(iv - iv_mkt), 100 * est.stderr / vega, False


def run_cell(cfg: SlvConfig, surface: CallSurface, ref, metric: str = "iv",
             leverage: str | float = "calibrated") -> list[TableCell]:
    """Simulate one (scheme, N) configuration and score every strike."""
    t0 = time.perf_counter()
    ens = simulate_hslv(cfg, surface, leverage)
    seconds = time.perf_counter() - t0
    cells = []
    for K in cfg.strikes:
        est = price_call(ens, K, cfg.market.r, cfg.horizon)
        err, se, band = score_cell(est, K, cfg.horizon, cfg.market, ref[K], metric)
        cells.append(TableCell(cfg.scheme, cfg.steps, K, err, se, est.mean, est.stderr,
                               ref[K][0], band, seconds))
    return cells


def error_table(base: SlvConfig, surface: CallSurface, schemes=tuple(SchemeKind),
                n_steps=DEFAULT_N_GRID, metric: str = "iv", executor=None,
                leverage: str | float = "calibrated") -> list[TableCell]:
    """Error cells for every scheme and step count; each run prices all strikes.

    ``executor`` (a ``concurrent.futures`` executor) runs configurations
    concurrently; the result order and values do not depend on it.
    """
    ref = market_reference(base.market, base.strikes, base.horizon)
    cfgs = [replace(base, scheme=SchemeKind(s), steps=int(n)) for s in schemes for n in n_steps]
    if executor is None:
        results = [run_cell(c, surface, ref, metric, leverage) for c in cfgs]
    else:
        results = list(executor.map(lambda c: run_cell(c, surface, ref, metric, leverage), cfgs))
    return [cell for cells in results for cell in cells]
