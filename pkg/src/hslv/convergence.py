"""Strong-convergence studies on coupled Brownian grids and parameter sweeps
of the SLV table error."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .engine import SlvConfig, derive_model_params, error_table
from .kernel import RandomStream, coarsen, make_brownian_grid
from .pricing import CosConfig, HestonParams, build_market_surface
from .variance import CirParams, SchemeKind, TruncationSpec, simulate_variance

__all__ = [
    "ConvergenceStudy",
    "SweepResult",
    "estimate_order",
    "run_study",
    "strong_error",
    "sweep",
    "write_study",
    "write_sweep",
]

FELLER_SETUP = CirParams(kappa=2.0, theta=0.09, gamma=0.3, v0=0.09)
DEFAULT_LEVELS = (8, 16, 32, 64, 128, 256, 512)
DEFAULT_REFERENCE = 4096


class ZeroErrorWarning(RuntimeWarning):
    """A level with zero error was left out of the order fit."""


@dataclass
class ConvergenceStudy:
    """Per-level strong errors at the horizon against a same-scheme reference.

    ``l2_error`` is measured on the output process ``Lbar = sqrt(V_effective)``,
    ``l2_error_raw`` on the recursion iterate ``L`` (they differ only for the
    truncated scheme), ``l1_error_V`` on ``V_effective``.
    """

    scheme: SchemeKind
    params: CirParams
    trunc: TruncationSpec | None
    levels: tuple[int, ...]
    reference_level: int
    paths: int
    horizon: float = 1.0
    l2_error: np.ndarray = field(default_factory=lambda: np.zeros(0))
    l2_error_raw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    l1_error_V: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slope: float = float("nan")
    intercept: float = float("nan")

    def __post_init__(self) -> None:
        self.scheme = SchemeKind(self.scheme)
        lv = tuple(int(n) for n in self.levels)
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("levels must be strictly increasing")
        if self.reference_level < 4 * lv[-1]:
            raise ValueError("reference level must be at least 4x the finest tested level")
        for n in lv:
            ratio = self.reference_level // n
            if self.reference_level % n or ratio & (ratio - 1):
                raise ValueError(f"level {n} is not a dyadic coarsening of {self.reference_level}")
        self.levels = lv

    @property
    def taus(self) -> np.ndarray:
        return self.horizon / np.asarray(self.levels, dtype=float)


def _terminal_values(scheme, params, trunc, grid):
    out = simulate_variance(scheme, params, trunc, grid)
    state, v_eff = out["state"][-1], out["V_effective"][-1]
    raw = state if scheme in (SchemeKind.TRUNCATED_LAMPERTI, SchemeKind.BACKWARD_LAMPERTI) \
        else np.sqrt(v_eff)
    return raw, np.sqrt(v_eff), v_eff


def strong_error(scheme, params: CirParams, trunc: TruncationSpec | None, level_grid, reference_grid
                 ) -> tuple[float, float, float]:
    """Errors at the horizon of one level against a coupled reference.

    Returns ``(l2 on Lbar, l2 on raw L, l1 on V)``. The level grid must be a
    dyadic coarsening of ``reference_grid`` for the errors to be pathwise.
    """
    scheme = SchemeKind(scheme)
    r_raw, r_bar, r_v = _terminal_values(scheme, params, trunc, reference_grid)
    c_raw, c_bar, c_v = _terminal_values(scheme, params, trunc, level_grid)
    return (math.sqrt(float(np.mean((c_bar - r_bar) ** 2))),
            math.sqrt(float(np.mean((c_raw - r_raw) ** 2))),
            float(np.mean(np.abs(c_v - r_v))))


def run_study(scheme, params: CirParams = FELLER_SETUP, trunc: TruncationSpec | None = None,
              levels=DEFAULT_LEVELS, reference_level: int = DEFAULT_REFERENCE, paths: int = 10_000,
              horizon: float = 1.0, seed: int = 0, batch: int = 1000) -> ConvergenceStudy:
    """Strong errors at every level, accumulated over path batches.

    Each batch draws the reference increments once and sums them down to every
    coarser level, so all levels see the same Brownian paths. Path ``j`` uses
    the same substream regardless of the batch size.
    """
    scheme = SchemeKind(scheme)
    if trunc is None and scheme is SchemeKind.TRUNCATED_LAMPERTI:
        trunc = TruncationSpec.default_for(params)
    study = ConvergenceStudy(scheme, params, trunc, tuple(levels), reference_level, paths, horizon)
    n = len(study.levels)
    sq_bar, sq_raw, abs_v = np.zeros(n), np.zeros(n), np.zeros(n)
    for start in range(0, paths, batch):
        m = min(batch, paths - start)
        grid = make_brownian_grid(RandomStream(seed, start), horizon, reference_level, m)
        finals = {}
        g = grid
        while g.n_steps >= study.levels[0]:
            if g.n_steps == reference_level or g.n_steps in study.levels:
                finals[g.n_steps] = _terminal_values(scheme, params, trunc, g)
            if g.n_steps % 2:
                break
            g = coarsen(g)
        r_raw, r_bar, r_v = finals[reference_level]
        for i, lv in enumerate(study.levels):
            c_raw, c_bar, c_v = finals[lv]
            sq_bar[i] += float(np.sum((c_bar - r_bar) ** 2))
            sq_raw[i] += float(np.sum((c_raw - r_raw) ** 2))
            abs_v[i] += float(np.sum(np.abs(c_v - r_v)))
    study.l2_error = np.sqrt(sq_bar / paths)
    study.l2_error_raw = np.sqrt(sq_raw / paths)
    study.l1_error_V = abs_v / paths
    study.slope, study.intercept = _fit(study.taus, study.l2_error)
    return study


def _fit(taus, errors) -> tuple[float, float]:
    taus, errors = np.asarray(taus, dtype=float), np.asarray(errors, dtype=float)
    keep = errors > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} level(s) with zero error excluded from the fit",
                      ZeroErrorWarning, stacklevel=3)
    if keep.sum() < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(np.log(taus[keep]), np.log(errors[keep]), 1)
    return float(slope), float(intercept)


def estimate_order(study: ConvergenceStudy, errors: str = "l2_error") -> float:
    """Least-squares slope of ``log(error)`` against ``log(tau)``.

    ``errors`` names the study attribute to fit. Needs at least four levels;
    levels with zero error are dropped with a :class:`ZeroErrorWarning`.
    """
    if len(study.levels) < 4:
        raise ValueError("order estimation needs at least four levels")
    return _fit(study.taus, getattr(study, errors))[0]


def write_study(studies, path: str | Path) -> None:
    """``scheme,N,tau,l2_error,l1_error_V`` rows, then ``slope=`` per study.

    With several studies the summary lines carry the scheme name after the
    slope, e.g. ``slope=0.51 scheme=truncated``.
    """
    studies = [studies] if isinstance(studies, ConvergenceStudy) else list(studies)
    lines = ["scheme,N,tau,l2_error,l1_error_V"]
    for s in studies:
        for n, tau, e2, e1 in zip(s.levels, s.taus, s.l2_error, s.l1_error_V):
            lines.append(f"{s.scheme.value},{n},{tau:.17g},{e2:.17g},{e1:.17g}")
    for s in studies:
        tag = f" scheme={s.scheme.value}" if len(studies) > 1 else ""
        lines.append(f"slope={estimate_order(s):.17g}{tag}")
        lines.append(f"slope_raw={estimate_order(s, 'l2_error_raw'):.17g}{tag}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class SweepResult:
    """Table error at one (N, K) cell for every scheme across a parameter grid.

    ``errors`` and ``stderrs`` have shape ``(len(grid), len(schemes))``.
    """

    parameter: str
    grid: tuple[float, ...]
    schemes: tuple[SchemeKind, ...]
    steps: int
    strike: float
    errors: np.ndarray
    stderrs: np.ndarray

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("sweep grid must be increasing")

    def column(self, scheme) -> np.ndarray:
        return self.errors[:, self.schemes.index(SchemeKind(scheme))]

    def growth_ratio(self, scheme) -> float:
        """Error at the last grid value over error at the first."""
        col = self.column(scheme)
        return float(col[-1] / col[0])


def sweep(parameter: str, grid, base: SlvConfig, schemes=tuple(SchemeKind), steps: int = 25,
          strike: float = 1.0, metric: str = "iv", executor=None, maturities=None, strikes=None,
          cos: CosConfig = CosConfig()) -> SweepResult:
    """Evaluate the table error of ``(steps, strike)`` per grid value and scheme.

    ``parameter="vbar"`` replaces the market long-run variance and rebuilds
    the market surface at every point; ``"p"`` changes only the model
    modification. Every cell uses ``base.seed`` and ``base.paths``.
    """
    if parameter not in ("vbar", "p"):
        raise ValueError(f"unknown sweep parameter {parameter!r}")
    grid = tuple(float(x) for x in grid)
    schemes = tuple(SchemeKind(s) for s in schemes)
    kw = {} if maturities is None else {"maturities": maturities}
    errs = np.empty((len(grid), len(schemes)))
    ses = np.empty_like(errs)
    base = replace(base, strikes=(float(strike),))
    surface = None
    for i, value in enumerate(grid):
        if parameter == "vbar":
            cir = replace(base.market.cir, theta=value)
            market: HestonParams = replace(base.market, cir=cir)
            p = base.p
            surface = build_market_surface(market, strikes=strikes, cfg=cos, **kw)
        else:
            market, p = base.market, value
            if surface is None:
                surface = build_market_surface(market, strikes=strikes, cfg=cos, **kw)
        model = market if p is None else derive_model_params(market, p)
        cfg = replace(base, market=market, model=model, p=p, trunc=TruncationSpec.default_for(model.cir))
        cells = error_table(cfg, surface, schemes, (steps,), metric, executor)
        for j, c in enumerate(cells):
            errs[i, j], ses[i, j] = c.err_pct, c.stderr_pct
    return SweepResult(parameter, grid, schemes, int(steps), float(strike), errs, ses)


def write_sweep(result: SweepResult, path: str | Path) -> None:
    """One row per grid value: ``value`` then ``<scheme>_err_pct,<scheme>_stderr_pct``."""
    head = ["value"]
    for s in result.schemes:
        head += [f"{s.value}_err_pct", f"{s.value}_stderr_pct"]
    lines = [",".join(head)]
    for i, v in enumerate(result.grid):
        row = [f"{v:.17g}"]
        for j in range(len(result.schemes)):
            row += [f"{result.errors[i, j]:.4f}", f"{result.stderrs[i, j]:.4f}"]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
