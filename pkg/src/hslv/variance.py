"""Discretizations of the square-root (CIR) variance process.

Four schemes share one stepping interface:

* full-truncation Euler on ``V`` (negative iterates clipped inside drift and
  diffusion);
* exact transition through a scaled noncentral chi-square draw;
* truncated Euler on the Lamperti variable ``L = sqrt(V)``, explicit, with
  the drift evaluated at ``max(L, b * tau**0.25)``;
* drift-implicit (backward) Euler on ``L``, solved by its positive root.

The Lamperti schemes use the drift ``phi(x) = kappa/2 * (theta/x - x)`` with
additive noise ``gamma/2 * dW``. That drift omits the Ito term
``-gamma**2 / (8x)``, so the discretized ``V = L**2`` tracks a CIR law with
long-run mean ``theta + gamma**2 / (4 kappa)``.

Step functions accept scalars or arrays and broadcast.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .kernel import LANE_EXACT, BrownianGrid, RandomStream, sample_noncentral_chisq

log = logging.getLogger(__name__)

__all__ = [
    "CirParams",
    "SchemeKind",
    "TruncationSpec",
    "VarianceIntegrator",
    "VarianceStepResult",
    "phi",
    "simulate_variance",
    "simulate_variance_path",
    "step_backward",
    "step_exact",
    "step_full_truncation_euler",
    "step_truncated",
    "truncate",
]


@dataclass(frozen=True)
class CirParams:
    kappa: float
    theta: float
    gamma: float
    v0: float

    def __post_init__(self) -> None:
        for name in ("kappa", "theta", "gamma", "v0"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"CirParams.{name} must be positive and finite, got {value!r}")

    @property
    def feller_satisfied(self) -> bool:
        return 2.0 * self.kappa * self.theta >= self.gamma ** 2

    def log_feller(self) -> None:
        if not self.feller_satisfied:
            log.info("Feller condition violated: 2*kappa*theta=%.6g < gamma^2=%.6g",
                     2 * self.kappa * self.theta, self.gamma ** 2)


@dataclass(frozen=True)
class TruncationSpec:
    """Truncation base ``b``; the floor at step size ``tau`` is ``b * tau**0.25``."""

    b: float

    def __post_init__(self) -> None:
        if not self.b > 0:
            raise ValueError("truncation base b must be positive")

    @classmethod
    def default_for(cls, params: CirParams) -> "TruncationSpec":
        return cls(float(np.sqrt(params.v0)))

    def check(self, params: CirParams) -> None:
        if self.b > np.sqrt(params.v0) * (1 + 1e-12):
            raise ValueError(f"truncation base b={self.b} exceeds sqrt(v0)={np.sqrt(params.v0)}")

    def floor(self, tau: float) -> float:
        return self.b * tau ** 0.25


class SchemeKind(str, enum.Enum):
    FULL_TRUNCATION_EULER = "euler"
    EXACT_NCX2 = "aes"
    TRUNCATED_LAMPERTI = "truncated"
    BACKWARD_LAMPERTI = "backward"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "SchemeKind":
        key = text.strip().lower()
        for kind in cls:
            if key in (kind.value, kind.label.lower(), kind.name.lower()):
                return kind
        raise ValueError(f"unknown scheme {text!r}")


_LABELS = {
    SchemeKind.FULL_TRUNCATION_EULER: "Euler",
    SchemeKind.EXACT_NCX2: "AES",
    SchemeKind.TRUNCATED_LAMPERTI: "Truncated",
    SchemeKind.BACKWARD_LAMPERTI: "Backward",
}


class VarianceStepResult(NamedTuple):
    L_next: np.ndarray | float
    V_next: np.ndarray | float
    V_effective: np.ndarray | float


def phi(x, params: CirParams):
    """Lamperti drift ``kappa/2 * (theta/x - x)``."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("phi is defined for x > 0 only")
    out = 0.5 * params.kappa * (params.theta / x - x)
    return float(out) if out.ndim == 0 else out


def truncate(x, floor: float):
    """Lower clamp ``max(floor, x)``."""
    return np.maximum(x, floor)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite input to variance step")


def _backward_newton(L_n, dW, tau, params: CirParams, tol=1e-15, max_iter=50):
    """Newton iteration on ``L - a - (kappa*tau/2)(theta/L - L) = 0``."""
    a = np.asarray(L_n + 0.5 * params.gamma * dW, dtype=float)
    h = 0.5 * params.kappa * tau
    x = np.maximum(a, np.sqrt(params.theta))
    for _ in range(max_iter):
        f = (1 + h) * x - a - h * params.theta / x
        fp = (1 + h) + h * params.theta / x ** 2
        step = f / fp
        x = x - step
        # the root is positive; halve toward zero rather than overshoot
        x = np.where(x > 0, x, 0.5 * (x + step))
        if np.all(np.abs(step) <= tol * np.abs(x)):
            break
    return x


def step_backward(L_n, dW, tau: float, params: CirParams, method: str = "closed") -> VarianceStepResult:
    """Drift-implicit Euler step for ``L``.

    ``method="closed"`` returns the positive root
    ``(a + sqrt(a^2 + kappa*tau*theta*(2 + kappa*tau))) / (2 + kappa*tau)`` with
    ``a = L_n + gamma/2 * dW``. ``method="newton"`` solves the same equation
    iteratively and exists for timing comparisons only.
    """
    _check_finite(L_n, dW)
    if method == "closed":
        kt = params.kappa * tau
        a = np.asarray(L_n, dtype=float) + 0.5 * params.gamma * np.asarray(dW, dtype=float)
        disc = np.sqrt(a * a + kt * params.theta * (2.0 + kt))
        # a + disc loses digits when a << 0; use the conjugate form there
        with np.errstate(divide="ignore", invalid="ignore"):
            L = np.where(
                a >= 0,
                (a + disc) / (2.0 + kt),
                (kt * params.theta) / (disc - a),
            )
    elif method == "newton":
        L = _backward_newton(L_n, dW, tau, params)
    else:
        raise ValueError(f"unknown backward method {method!r}")
    V = L * L
    if np.ndim(L) == 0:
        L, V = float(L), float(V)
    return VarianceStepResult(L, V, V)


def step_truncated(L_n, dW, tau: float, params: CirParams, trunc: TruncationSpec) -> VarianceStepResult:
    """Truncated explicit Euler step for ``L``.

    The raw iterate is returned as ``L_next`` and may sit below the floor;
    ``V_effective`` is the squared truncated output ``max(L_next, floor)**2``.
    """
    floor = trunc.floor(tau)
    Lbar = truncate(np.asarray(L_n, dtype=float), floor)
    L = (np.asarray(L_n, dtype=float) + tau * 0.5 * params.kappa * (params.theta / Lbar - Lbar)
         + 0.5 * params.gamma * np.asarray(dW, dtype=float))
    Lbar_next = truncate(L, floor)
    V_eff = Lbar_next * Lbar_next
    if np.ndim(L) == 0:
        return VarianceStepResult(float(L), float(V_eff), float(V_eff))
    return VarianceStepResult(L, V_eff, V_eff)


def step_full_truncation_euler(V_n, dW, tau: float, params: CirParams) -> VarianceStepResult:
    """Full-truncation Euler: ``V + kappa*(theta - V+)*tau + gamma*sqrt(V+)*dW``."""
    V_n = np.asarray(V_n, dtype=float)
    vp = np.maximum(V_n, 0.0)
    V = V_n + params.kappa * (params.theta - vp) * tau + params.gamma * np.sqrt(vp) * np.asarray(dW, dtype=float)
    V_eff = np.maximum(V, 0.0)
    L = np.sqrt(V_eff)
    if np.ndim(V) == 0:
        return VarianceStepResult(float(L), float(V), float(V_eff))
    return VarianceStepResult(L, V, V_eff)


def exact_transition_coefficients(tau: float, params: CirParams) -> tuple[float, float, float]:
    """Scale ``c``, degrees of freedom ``d`` and decay ``exp(-kappa*tau)``."""
    decay = np.exp(-params.kappa * tau)
    c = params.gamma ** 2 * -np.expm1(-params.kappa * tau) / (4.0 * params.kappa)
    d = 4.0 * params.kappa * params.theta / params.gamma ** 2
    return c, d, decay


def step_exact(V_n, tau: float, params: CirParams, stream: RandomStream) -> VarianceStepResult:
    """Exact CIR transition ``V_next = c * chi2'(d, V_n * exp(-kappa*tau) / c)``."""
    V_n = np.asarray(V_n, dtype=float)
    if np.any(V_n < 0):
        raise ValueError("exact transition needs V_n >= 0")
    c, d, decay = exact_transition_coefficients(tau, params)
    V = c * np.asarray(sample_noncentral_chisq(stream, d, V_n * decay / c))
    L = np.sqrt(V)
    if np.ndim(V) == 0:
        return VarianceStepResult(float(L), float(V), float(V))
    return VarianceStepResult(L, V, V)


class VarianceIntegrator:
    """Vectorized stepper over a cross-section of paths.

    Holds the recursion state (``L`` for the Lamperti schemes, signed ``V`` for
    Euler, ``V`` for the exact transition) and exposes ``V_effective``, the
    value an asset step should see.
    """

    def __init__(self, scheme: SchemeKind, params: CirParams, n_paths: int, tau: float,
                 trunc: TruncationSpec | None = None, seed: int = 0,
                 path_ids: np.ndarray | None = None, backward_method: str = "closed"):
        self.scheme = SchemeKind(scheme)
        self.params = params
        self.tau = float(tau)
        self.trunc = trunc if trunc is not None else TruncationSpec.default_for(params)
        self.backward_method = backward_method
        if self.scheme is SchemeKind.TRUNCATED_LAMPERTI and not self.tau <= 1.0:
            raise ValueError("truncated scheme is defined for step sizes tau <= 1")
        ids = np.arange(n_paths, dtype=np.uint64) if path_ids is None else np.asarray(path_ids, dtype=np.uint64)
        self._stream = RandomStream(seed, ids)
        self.step_index = 0
        if self.scheme in (SchemeKind.TRUNCATED_LAMPERTI, SchemeKind.BACKWARD_LAMPERTI):
            self.state = np.full(n_paths, np.sqrt(params.v0))
        else:
            self.state = np.full(n_paths, float(params.v0))
        self.V_effective = np.full(n_paths, float(params.v0))

    @property
    def L_effective(self) -> np.ndarray:
        """Lamperti-scale output (truncated for the truncated scheme)."""
        return np.sqrt(self.V_effective)

    def step(self, dW: np.ndarray) -> np.ndarray:
        """Advance one step with variance-driver increments ``dW``; returns ``V_effective``."""
        p, tau = self.params, self.tau
        if self.scheme is SchemeKind.FULL_TRUNCATION_EULER:
            res = step_full_truncation_euler(self.state, dW, tau, p)
            self.state = res.V_next
        elif self.scheme is SchemeKind.EXACT_NCX2:
            res = step_exact(self.state, tau, p, self._stream.at(LANE_EXACT, self.step_index))
            self.state = res.V_next
        elif self.scheme is SchemeKind.TRUNCATED_LAMPERTI:
            res = step_truncated(self.state, dW, tau, p, self.trunc)
            self.state = res.L_next
        else:
            res = step_backward(self.state, dW, tau, p, self.backward_method)
            self.state = res.L_next
        self.step_index += 1
        self.V_effective = np.asarray(res.V_effective, dtype=float)
        return self.V_effective


def simulate_variance(scheme: SchemeKind, params: CirParams, trunc: TruncationSpec | None,
                      grid: BrownianGrid, backward_method: str = "closed") -> dict[str, np.ndarray]:
    """Run ``scheme`` over every path of ``grid``.

    Returns arrays of shape ``(N + 1, n_paths)``: ``state`` (raw recursion
    variable) and ``V_effective``; row 0 is the initial condition.
    """
    integ = VarianceIntegrator(scheme, params, grid.n_paths, grid.tau, trunc,
                               seed=grid.seed, path_ids=grid.path_ids if grid.path_ids.size else None,
                               backward_method=backward_method)
    state = np.empty((grid.n_steps + 1, grid.n_paths))
    v_eff = np.empty_like(state)
    state[0], v_eff[0] = integ.state, integ.V_effective
    for m in range(grid.n_steps):
        v_eff[m + 1] = integ.step(grid.dW[m])
        state[m + 1] = integ.state
    return {"state": state, "V_effective": v_eff}


def simulate_variance_path(scheme: SchemeKind, params: CirParams, trunc: TruncationSpec | None,
                           grid: BrownianGrid, path: int) -> list[VarianceStepResult]:
    """Step results along a single path of ``grid`` (initial state excluded)."""
    scheme = SchemeKind(scheme)
    trunc = trunc if trunc is not None else TruncationSpec.default_for(params)
    tau = grid.tau
    ids = grid.path_ids if grid.path_ids.size else np.arange(grid.n_paths, dtype=np.uint64)
    stream = RandomStream(grid.seed, int(ids[path]))
    if scheme in (SchemeKind.TRUNCATED_LAMPERTI, SchemeKind.BACKWARD_LAMPERTI):
        x = float(np.sqrt(params.v0))
    else:
        x = float(params.v0)
    out = []
    for m in range(grid.n_steps):
        dW = float(grid.dW[m, path])
        if scheme is SchemeKind.FULL_TRUNCATION_EULER:
            res = step_full_truncation_euler(x, dW, tau, params)
            x = res.V_next
        elif scheme is SchemeKind.EXACT_NCX2:
            res = step_exact(x, tau, params, stream.at(LANE_EXACT, m))
            x = res.V_next
        elif scheme is SchemeKind.TRUNCATED_LAMPERTI:
            res = step_truncated(x, dW, tau, params, trunc)
            x = res.L_next
        else:
            res = step_backward(x, dW, tau, params)
            x = res.L_next
        out.append(res)
    return out
