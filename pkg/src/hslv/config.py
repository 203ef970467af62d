"""Experiment configuration: flat sectioned ``key = value`` text.

Every key has a typed default, unknown sections and keys are rejected, and any
value can be overridden from the command line as ``--section.key value`` or
``--key value``; a bare key that occurs in several sections binds to the
first of them in schema order (``--paths`` is ``--run.paths``).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .engine import SlvConfig, derive_model_params
from .localvol import BinSpec, DupireConfig, LeverageConfig
from .pricing import CosConfig, HestonParams
from .variance import CirParams, SchemeKind, TruncationSpec

__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA", "default_config_text", "load_config", "short_flags"]


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _schemes(text: str) -> tuple[SchemeKind, ...]:
    return tuple(SchemeKind.parse(x.strip()) for x in text.split(",") if x.strip())


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


ALL_SCHEMES = "euler, aes, truncated, backward"

# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "market": {
        "gamma": (float, "0.95"),
        "kappa": (float, "1.05"),
        "rho": (float, "-0.315"),
        "theta": (float, "0.0855"),
        "s0": (float, "1.0"),
        "r": (float, "0.0"),
        "v0": (float, "0.0945"),
    },
    "model": {
        "p": (_optional_float, "0.25"),
    },
    "run": {
        "seed": (int, "0"),
        "paths": (int, "10000"),
        "horizon": (float, "5.0"),
        "steps": (_ints, "5, 10, 25, 40"),
        "strikes": (_floats, "0.7, 1.0, 1.5"),
        "schemes": (_schemes, ALL_SCHEMES),
        "error_metric": (_choice("iv", "price"), "iv"),
        "threads": (int, "1"),
        "coupling": (_choice("noise", "increment"), "noise"),
        "backward_method": (_choice("closed", "newton"), "closed"),
    },
    "simulate": {
        "scheme": (SchemeKind.parse, "backward"),
        "steps": (int, "40"),
        "leverage": (str, "calibrated"),
    },
    "surface": {
        "maturities": (_floats, "0.25, 0.5, 1, 2, 3, 4, 5"),
        "n_strikes": (int, "60"),
        "k_min": (float, "0.3"),
        "k_max": (float, "3.0"),
        "cos_terms": (int, "1024"),
        "cos_width": (float, "24.0"),
    },
    "guards": {
        "dt_bump": (float, "0.01"),
        "dk_bump_rel": (float, "0.01"),
        "denom_floor": (float, "1e-6"),
        "lv_floor": (float, "1e-4"),
        "lv_cap": (float, "4.0"),
        "eps_v": (float, "1e-4"),
        "lev_floor": (float, "0.01"),
        "lev_cap": (float, "25.0"),
        "n_bins": (int, "20"),
        "trunc_b": (_optional_float, "none"),
    },
    "converge": {
        "schemes": (_schemes, "truncated, backward"),
        "kappa": (float, "2.0"),
        "theta": (float, "0.09"),
        "gamma": (float, "0.3"),
        "v0": (float, "0.09"),
        "horizon": (float, "1.0"),
        "levels": (_ints, "8, 16, 32, 64, 128, 256, 512"),
        "reference_level": (int, "4096"),
        "paths": (int, "10000"),
        "batch": (int, "1000"),
    },
    "condexp": {
        "schemes": (_schemes, "truncated, backward, aes"),
        "bins": (int, "20"),
        "paths": (int, "10000"),
        "tau": (float, "0.001"),
        "times": (_floats, "0.5, 1.0"),
    },
    "sweep": {
        "parameter": (_choice("vbar", "p"), "p"),
        "vbar_grid": (_floats, "0.0855, 0.17, 0.34"),
        "p_grid": (_floats, "0.1, 0.25, 0.4"),
        "steps": (int, "25"),
        "strike": (float, "1.0"),
        "schemes": (_schemes, ALL_SCHEMES),
    },
    "output": {
        "dir": (str, "out"),
    },
}


def short_flags() -> dict[str, str]:
    """Map of bare key name to the first section (in schema order) defining it."""
    out: dict[str, str] = {}
    for sec, keys in SCHEMA.items():
        for k in keys:
            out.setdefault(k, sec)
    return out


def _parse_value(section: str, key: str, text: str) -> Any:
    parser = SCHEMA[section][key][0]
    try:
        return parser(text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None


@dataclass
class ExperimentConfig:
    """Resolved configuration values, ``values[section][key]``."""

    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for sec, keys in SCHEMA.items():
            sec_vals = self.values.setdefault(sec, {})
            for key, (_, default) in keys.items():
                if key not in sec_vals:
                    sec_vals[key] = _parse_value(sec, key, default)
        self.validate()

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def set(self, section: str, key: str, text: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = _parse_value(section, key, text)

    def validate(self) -> None:
        run = self["run"]
        if run["paths"] < 100:
            raise ConfigError("[run] paths must be at least 100")
        if not run["steps"] or min(run["steps"]) < 1:
            raise ConfigError("[run] steps must be positive integers")
        if not run["schemes"]:
            raise ConfigError("[run] schemes must not be empty")
        if run["threads"] < 1:
            raise ConfigError("[run] threads must be at least 1")
        if not 0 <= run["seed"] < 2 ** 64:
            raise ConfigError("[run] seed must be an unsigned 64-bit integer")
        lev = self["simulate"]["leverage"]
        if lev != "calibrated":
            try:
                if not float(lev) >= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("[simulate] leverage must be 'calibrated' or a nonnegative number") from None
        try:
            self.market()
            self.model()
            self.dupire()
            self.leverage_guards()
            self.cos()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def market(self) -> HestonParams:
        m = self["market"]
        return HestonParams.from_values(kappa=m["kappa"], theta=m["theta"], gamma=m["gamma"],
                                        v0=m["v0"], rho=m["rho"], r=m["r"], s0=m["s0"])

    def model(self) -> HestonParams:
        p = self["model"]["p"]
        return self.market() if p is None else derive_model_params(self.market(), p)

    def dupire(self) -> DupireConfig:
        g = self["guards"]
        return DupireConfig(g["dt_bump"], g["dk_bump_rel"], g["denom_floor"], g["lv_floor"], g["lv_cap"])

    def leverage_guards(self) -> LeverageConfig:
        g = self["guards"]
        return LeverageConfig(g["eps_v"], g["lev_floor"], g["lev_cap"])

    def cos(self) -> CosConfig:
        s = self["surface"]
        return CosConfig(s["cos_terms"], s["cos_width"])

    def trunc(self, params: CirParams) -> TruncationSpec:
        b = self["guards"]["trunc_b"]
        return TruncationSpec.default_for(params) if b is None else TruncationSpec(b)

    def converge_params(self) -> CirParams:
        c = self["converge"]
        return CirParams(kappa=c["kappa"], theta=c["theta"], gamma=c["gamma"], v0=c["v0"])

    def slv_base(self, scheme=None, steps: int | None = None) -> SlvConfig:
        run = self["run"]
        model = self.model()
        return SlvConfig(
            market=self.market(), model=model,
            scheme=scheme if scheme is not None else run["schemes"][0],
            paths=run["paths"], steps=steps if steps is not None else run["steps"][-1],
            horizon=run["horizon"], strikes=run["strikes"], seed=run["seed"],
            p=self["model"]["p"], dupire=self.dupire(), bins=BinSpec(self["guards"]["n_bins"]),
            leverage=self.leverage_guards(), trunc=self.trunc(model.cir),
            backward_method=run["backward_method"], coupling=run["coupling"])


def load_config(path: str | Path | None = None, overrides: dict[tuple[str, str], str] | None = None
                ) -> ExperimentConfig:
    """Read ``path`` (if given), apply ``overrides`` and fill defaults."""
    raw: dict[str, dict[str, Any]] = {}
    if path is not None:
        cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None, empty_lines_in_values=False)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{sec}]")
            for key, text in cp.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
                raw.setdefault(sec, {})[key] = _parse_value(sec, key, text)
    for (sec, key), text in (overrides or {}).items():
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown override {sec}.{key}")
        raw.setdefault(sec, {})[key] = _parse_value(sec, key, text)
    return ExperimentConfig(raw)


def default_config_text() -> str:
    """The full default configuration as commented ``key = value`` text."""
    lines = ["# default experiment configuration"]
    for sec, keys in SCHEMA.items():
        lines.append("")
        lines.append(f"[{sec}]")
        for key, (_, default) in keys.items():
            lines.append(f"{key} = {default}")
    return "\n".join(lines) + "\n"

