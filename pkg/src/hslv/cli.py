"""Command-line front end for the experiment suite.

Every subcommand writes plain-text outputs under the output directory and
exits 0 when all of its invariant checks pass. Otherwise it prints a JSON
failure list to stderr and exits 1; configuration errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import SCHEMA, ConfigError, ExperimentConfig, load_config, short_flags
from .convergence import run_study, sweep, write_study, write_sweep
from .engine import error_table, price_call, simulate_hslv
from .localvol import BinSpec, estimate_conditional_expectation
from .pricing import (CallSurface, SurfaceArbitrageError, build_market_surface, cos_call_price,
                      default_strikes, write_surface)
from .variance import SchemeKind

__all__ = ["main"]

ALIASES = {("run", "error_metric"): ["--error-metric"], ("output", "dir"): ["--out"]}


class Failures(list):
    def add(self, check: str, **detail) -> None:
        self.append({"check": check, **detail})


def _write(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _executor(cfg: ExperimentConfig):
    n = cfg["run"]["threads"]
    return ThreadPoolExecutor(max_workers=n) if n > 1 else nullcontext(None)


def _surface(cfg: ExperimentConfig, market=None) -> CallSurface:
    s = cfg["surface"]
    return build_market_surface(market or cfg.market(), maturities=s["maturities"],
                                strikes=default_strikes(s["n_strikes"], s["k_min"], s["k_max"]),
                                cfg=cfg.cos())


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg["output"]["dir"])


def cmd_market(cfg: ExperimentConfig, fails: Failures) -> None:
    try:
        surface = _surface(cfg)
    except SurfaceArbitrageError as exc:
        i, j = exc.cell
        fails.add("surface_arbitrage", maturity_index=int(i), strike_index=int(j), message=str(exc))
        return
    write_surface(surface, _out(cfg) / "surface.csv")


def cmd_simulate(cfg: ExperimentConfig, fails: Failures) -> None:
    sim = cfg["simulate"]
    base = cfg.slv_base(sim["scheme"], sim["steps"])
    lev = sim["leverage"]
    leverage = lev if lev == "calibrated" else float(lev)
    surface = _surface(cfg) if leverage == "calibrated" else None
    ens = simulate_hslv(base, surface, leverage)
    lines = ["K,price,stderr,market_price"]
    for K in base.strikes:
        est = price_call(ens, K, base.market.r, base.horizon)
        mkt = cos_call_price(base.market, K, base.horizon, cfg.cos())
        lines.append(f"{K:.17g},{est.mean:.17g},{est.stderr:.17g},{mkt:.17g}")
    _write(_out(cfg) / f"simulate_{base.scheme.value}_N{base.steps}.csv", lines)
    S = ens.S
    fwd = base.model.s0 * math.exp(base.market.r * base.horizon)
    se = float(S.std(ddof=1)) / math.sqrt(S.size)
    if abs(float(S.mean()) - fwd) > 4 * se:
        fails.add("martingale", mean=float(S.mean()), forward=fwd, stderr=se)
    if np.any(ens.V < 0):
        fails.add("variance_negative", count=int(np.sum(ens.V < 0)))


def _table_name(K: float) -> str:
    return f"table_K{round(100 * K):03d}.csv"


def cmd_tables(cfg: ExperimentConfig, fails: Failures) -> None:
    run = cfg["run"]
    surface = _surface(cfg)
    with _executor(cfg) as ex:
        cells = error_table(cfg.slv_base(), surface, run["schemes"], run["steps"], run["error_metric"], ex)
    out = _out(cfg)
    n_lo, n_hi = min(run["steps"]), max(run["steps"])
    for K in run["strikes"]:
        rows = [c for c in cells if c.K == K]
        lines = ["scheme,N,K,err_pct,stderr_pct"]
        lines += [f"{c.scheme.value},{c.N},{c.K:.4f},{c.err_pct:.4f},{c.stderr_pct:.4f}" for c in rows]
        violated = []
        for s in run["schemes"]:
            err = {c.N: c.err_pct for c in rows if c.scheme is s}
            if not err[n_hi] < err[n_lo]:
                violated.append(s.value)
        lines.append(f"# trend_check={'violated' if violated else 'ok'} N={n_lo}->{n_hi}"
                     + (f" schemes={'|'.join(violated)}" if violated else ""))
        _write(out / _table_name(K), lines)
        for c in rows:
            if c.band_violation or not math.isfinite(c.err_pct):
                fails.add("implied_vol_band", scheme=c.scheme.value, N=c.N, K=c.K, price=c.price)
    # wall-clock is not reproducible, so it lives apart from the table files
    secs: dict[str, float] = {}
    for c in cells:
        if c.K == run["strikes"][0]:
            secs[c.scheme.value] = secs.get(c.scheme.value, 0.0) + c.seconds
    _write(out / "tables_timings.txt",
           [f"# {SchemeKind(s).label}: {t:.4f} seconds" for s, t in secs.items()])


def cmd_converge(cfg: ExperimentConfig, fails: Failures) -> None:
    c = cfg["converge"]
    params = cfg.converge_params()
    trunc = cfg.trunc(params)

    def one(s):
        return run_study(s, params, trunc, c["levels"], c["reference_level"], c["paths"],
                         c["horizon"], cfg["run"]["seed"], c["batch"])

    try:
        with _executor(cfg) as ex:
            studies = list(ex.map(one, c["schemes"])) if ex else [one(s) for s in c["schemes"]]
    except ValueError as exc:
        raise ConfigError(f"[converge] {exc}") from None
    write_study(studies, _out(cfg) / "convergence.csv")
    for st in studies:
        errs = np.concatenate([st.l2_error, st.l1_error_V])
        if not np.all(np.isfinite(errs)) or np.any(errs < 0):
            fails.add("convergence_errors", scheme=st.scheme.value)
        if not math.isfinite(st.slope):
            fails.add("convergence_slope", scheme=st.scheme.value)


def cmd_condexp(cfg: ExperimentConfig, fails: Failures) -> None:
    """Binned E[V | S] under the unmodified market model with unit leverage."""
    c = cfg["condexp"]
    market = cfg.market()
    for s in c["schemes"]:
        for t in c["times"]:
            steps = int(round(t / c["tau"]))
            if steps < 1 or not math.isclose(steps * c["tau"], t, rel_tol=1e-9):
                raise ConfigError(f"[condexp] time {t} is not a multiple of tau={c['tau']}")
            base = cfg.slv_base(s, steps)
            base.model, base.p, base.horizon, base.paths = market, None, float(t), c["paths"]
            base.trunc = cfg.trunc(market.cir)
            ens = simulate_hslv(base, None, leverage=1.0)
            est = estimate_conditional_expectation(ens.S, ens.V, BinSpec(c["bins"]))
            lines = ["bin_lo,bin_hi,mean_v"]
            lines += [f"{lo:.17g},{hi:.17g},{mv:.17g}" for lo, hi, mv in est.rows()]
            _write(_out(cfg) / f"condexp_{SchemeKind(s).value}_t{t:g}.csv", lines)
            if not np.all(np.isfinite(est.bin_means)) or np.any(est.bin_means < 0):
                fails.add("condexp_means", scheme=SchemeKind(s).value, t=t)


def cmd_sweep(cfg: ExperimentConfig, fails: Failures) -> None:
    sw = cfg["sweep"]
    param = sw["parameter"]
    grid = sw["vbar_grid"] if param == "vbar" else sw["p_grid"]
    s = cfg["surface"]
    try:
        with _executor(cfg) as ex:
            res = sweep(param, grid, cfg.slv_base(), sw["schemes"], sw["steps"], sw["strike"],
                        cfg["run"]["error_metric"], ex, maturities=s["maturities"],
                        strikes=default_strikes(s["n_strikes"], s["k_min"], s["k_max"]), cos=cfg.cos())
    except ValueError as exc:
        fails.add("sweep_point_invalid", parameter=param, message=str(exc))
        return
    write_sweep(res, _out(cfg) / f"sweep_{param}.csv")
    if not np.all(np.isfinite(res.errors)):
        fails.add("sweep_errors", parameter=param)


COMMANDS = {
    "market": (cmd_market, "write the analytic market call surface"),
    "simulate": (cmd_simulate, "run one SLV simulation and price the configured strikes"),
    "tables": (cmd_tables, "error tables for every scheme, step count and strike"),
    "converge": (cmd_converge, "strong-convergence study on coupled grids"),
    "condexp": (cmd_condexp, "binned conditional expectation of the variance"),
    "sweep": (cmd_sweep, "table error across a parameter grid"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="configuration file")
    short = short_flags()
    for sec, keys in SCHEMA.items():
        group = common.add_argument_group(f"[{sec}] overrides")
        for key, (_, default) in keys.items():
            flags = [f"--{sec}.{key}"]
            if short.get(key) == sec:
                flags.append(f"--{key}")
            flags += ALIASES.get((sec, key), [])
            group.add_argument(*flags, dest=f"{sec}.{key}", metavar="VALUE", default=None,
                               help=f"default: {default}")
    parser = argparse.ArgumentParser(prog="hslv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            sec, key = dest.split(".", 1)
            overrides[(sec, key)] = value
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"hslv: configuration error: {exc}", file=sys.stderr)
        return 2
    fails = Failures()
    _out(cfg).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command][0](cfg, fails)
    except ConfigError as exc:
        print(f"hslv: configuration error: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - t0
    if fails:
        print(json.dumps({"command": args.command, "status": "fail", "failures": fails}, sort_keys=True),
              file=sys.stderr)
        return 1
    print(f"{args.command}: ok ({elapsed:.2f} s), outputs in {_out(cfg)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
