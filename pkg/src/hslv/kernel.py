"""Counter-based random streams, normal and noncentral chi-square sampling,
and Brownian increment grids with dyadic coupling.

Every variate is a pure function of ``(seed, stream_id, counter)``. The
generator is Philox4x32-10 evaluated directly on arrays of stream ids, so a
whole cross-section of paths is sampled in one vectorized call while each path
still owns an independent substream. Results therefore do not depend on the
number of paths simulated alongside, on batching, or on thread count.

Counter layout (64 bits): the upper 32 bits select a *lane*, the lower 32 bits
index draws within the lane. Lanes separate independent uses of a path's
stream (variance driver, asset driver, exact-transition sampling).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "LANE_W",
    "LANE_W_TILDE",
    "LANE_EXACT",
    "BrownianGrid",
    "MemoryBudgetError",
    "RandomStream",
    "coarsen",
    "make_brownian_grid",
    "philox4x32",
    "sample_noncentral_chisq",
    "sample_standard_normal",
]

LANE_W = 0
LANE_W_TILDE = 1
LANE_EXACT = 2

# Grids larger than this (in float64 elements per array) are refused.
DEFAULT_GRID_BUDGET = 50_000_000

_MASK32 = np.uint64(0xFFFFFFFF)
_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = 0x9E3779B9
_PHILOX_W1 = 0xBB67AE85
_TWO_NEG53 = 2.0 ** -53


class MemoryBudgetError(MemoryError):
    """Requested grid exceeds the configured element budget."""


def philox4x32(counter, key, rounds: int = 10) -> tuple[np.ndarray, ...]:
    """Philox4x32 block function on broadcastable uint32 words.

    Parameters
    ----------
    counter : sequence of four array-likes
        Counter words ``c0..c3`` (values below 2**32).
    key : sequence of two ints
        Key words ``k0, k1``.

    Returns
    -------
    tuple of four uint64 arrays holding 32-bit output words.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) for c in counter))
    c0, c1, c2, c3 = (c.copy() for c in (c0, c1, c2, c3))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        if r:
            k0 = (k0 + _PHILOX_W0) & 0xFFFFFFFF
            k1 = (k1 + _PHILOX_W1) & 0xFFFFFFFF
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> np.uint64(32)) ^ c1 ^ np.uint64(k0),
            p1 & _MASK32,
            (p0 >> np.uint64(32)) ^ c3 ^ np.uint64(k1),
            p0 & _MASK32,
        )
    return c0, c1, c2, c3


def _words_to_unit(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """Two 32-bit words -> float in the open interval (0, 1), 53-bit grid."""
    k = ((hi >> np.uint64(5)) << np.uint64(26)) | (lo >> np.uint64(6))
    return (k.astype(np.float64) + 0.5) * _TWO_NEG53


@dataclass
class RandomStream:
    """Seeded substream identified by ``(seed, stream_id)``.

    ``stream_id`` may be an integer array, in which case every draw returns one
    variate per id. Each draw consumes exactly one counter position.
    """

    seed: int
    stream_id: int | np.ndarray = 0
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        if np.ndim(self.stream_id):
            self.stream_id = np.asarray(self.stream_id, dtype=np.uint64)
        else:
            self.stream_id = int(self.stream_id) & 0xFFFFFFFFFFFFFFFF

    @classmethod
    def for_paths(cls, seed: int, n_paths: int, lane: int = 0, offset: int = 0) -> "RandomStream":
        """One substream per path, ids ``offset .. offset + n_paths - 1``."""
        ids = np.arange(offset, offset + n_paths, dtype=np.uint64)
        return cls(seed, ids, lane << 32)

    def at(self, lane: int, index: int = 0) -> "RandomStream":
        """Copy positioned at ``index`` within ``lane``."""
        return RandomStream(self.seed, self.stream_id, (lane << 32) | index)

    def uniform_pair(self, index: int | np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Two independent U(0,1) variates from one counter position.

        With ``index`` given, draws at counters ``(lane, index)`` without
        touching this stream's own counter (vectorized over ``index``).
        """
        if index is None:
            ctr = self.counter
            self.counter += 1
            lo, hi = ctr & 0xFFFFFFFF, ctr >> 32
        else:
            lane = self.counter >> 32
            lo, hi = np.asarray(index, dtype=np.uint64), lane
        sid = np.asarray(self.stream_id, dtype=np.uint64)
        w0, w1, w2, w3 = philox4x32(
            (lo, hi, sid & _MASK32, sid >> np.uint64(32)),
            (self.seed & 0xFFFFFFFF, self.seed >> 32),
        )
        return _words_to_unit(w0, w1), _words_to_unit(w2, w3)

    def normal(self):
        return sample_standard_normal(self)

    def noncentral_chisq(self, dof, noncentrality):
        return sample_noncentral_chisq(self, dof, noncentrality)


def _box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sample_standard_normal(stream: RandomStream):
    """One N(0, 1) variate per stream id; advances the counter by one."""
    z = _box_muller(*stream.uniform_pair())
    return float(z) if z.ndim == 0 else z


def normals_block(stream: RandomStream, lane: int, start: int, count: int) -> np.ndarray:
    """Normals at counters ``(lane, start .. start+count-1)`` as a ``(count, n_ids)`` array."""
    idx = np.arange(start, start + count, dtype=np.uint64)
    sid = np.atleast_1d(np.asarray(stream.stream_id, dtype=np.uint64))
    probe = RandomStream(stream.seed, sid[None, :], lane << 32)
    u1, u2 = probe.uniform_pair(idx[:, None])
    return _box_muller(u1, u2)


def _poisson_inverse(u: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Smallest k with P(Poisson(mu) <= k) >= u, vectorized.

    Starts from a normal-approximation guess and walks with the pmf
    recurrence; the CDF at the guess comes from the regularized gamma.
    """
    u, mu = np.broadcast_arrays(np.asarray(u, float), np.asarray(mu, float))
    k = np.floor(mu + np.sqrt(mu) * special.ndtri(u) + 0.5)
    k = np.maximum(k, 0.0)
    k = np.where(mu == 0.0, 0.0, k)
    cdf = special.pdtr(k, mu)
    pmf = np.exp(k * np.log(np.where(mu > 0, mu, 1.0)) - mu - special.gammaln(k + 1.0))
    pmf = np.where(mu == 0.0, 1.0, pmf)
    # walk up while the CDF is still below u
    up = cdf < u
    while np.any(up):
        k = np.where(up, k + 1.0, k)
        pmf = np.where(up, pmf * mu / np.maximum(k, 1.0), pmf)
        cdf = np.where(up, cdf + pmf, cdf)
        if not np.any(pmf[up] > 0):
            # pmf underflowed far in the tail; finish with the exact CDF
            cdf = np.where(up, special.pdtr(k, mu), cdf)
        up = cdf < u
    # walk down while P(X <= k-1) >= u
    down = (k > 0) & (cdf - pmf >= u)
    while np.any(down):
        cdf = np.where(down, cdf - pmf, cdf)
        pmf = np.where(down, pmf * k / np.where(mu > 0, mu, 1.0), pmf)
        k = np.where(down, k - 1.0, k)
        down = (k > 0) & (cdf - pmf >= u)
    return k


def sample_noncentral_chisq(stream: RandomStream, dof, noncentrality):
    """Noncentral chi-square variate(s) with real ``dof > 0``.

    Poisson mixture: ``N ~ Poisson(lambda / 2)``, then a central chi-square
    with ``dof + 2N`` degrees of freedom, both drawn by exact inversion from a
    single counter position.
    """
    dof = np.asarray(dof, dtype=float)
    lam = np.asarray(noncentrality, dtype=float)
    if np.any(~(dof > 0)):
        raise ValueError("noncentral chi-square requires dof > 0")
    if np.any(~(lam >= 0)):
        raise ValueError("noncentral chi-square requires noncentrality >= 0")
    u1, u2 = stream.uniform_pair()
    n = _poisson_inverse(u1, 0.5 * lam)
    x = 2.0 * special.gammaincinv(0.5 * dof + n, u2)
    return float(x) if np.ndim(x) == 0 else x


@dataclass
class BrownianGrid:
    """Increments ``dW`` and ``dW_tilde`` of shape ``(n_steps, n_paths)``.

    ``level`` counts dyadic refinements relative to the grid this one was
    built at; :func:`coarsen` decrements it.
    """

    horizon: float
    dW: np.ndarray
    dW_tilde: np.ndarray
    seed: int = 0
    path_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    level: int = 0

    @property
    def n_steps(self) -> int:
        return self.dW.shape[0]

    @property
    def n_paths(self) -> int:
        return self.dW.shape[1]

    @property
    def tau(self) -> float:
        return self.horizon / self.n_steps


def make_brownian_grid(stream: RandomStream, T: float, N: int, paths: int,
                       budget: int = DEFAULT_GRID_BUDGET) -> BrownianGrid:
    """Build ``paths`` independent pairs of N(0, T/N) increment sequences.

    Path ``j`` uses substream ``stream.stream_id + j`` (scalar base id); ``dW``
    comes from lane :data:`LANE_W` and ``dW_tilde`` from :data:`LANE_W_TILDE`,
    counter index = step.
    """
    if not T > 0:
        raise ValueError("horizon must be positive")
    if N < 1 or paths < 1:
        raise ValueError("need N >= 1 and paths >= 1")
    if N * paths > budget:
        raise MemoryBudgetError(
            f"grid of {N} x {paths} exceeds budget of {budget} elements; "
            "simulate step by step instead")
    base = int(np.asarray(stream.stream_id).ravel()[0]) if np.ndim(stream.stream_id) else int(stream.stream_id)
    ids = np.arange(base, base + paths, dtype=np.uint64)
    per_path = RandomStream(stream.seed, ids)
    sd = np.sqrt(T / N)
    dW = sd * normals_block(per_path, LANE_W, 0, N)
    dWt = sd * normals_block(per_path, LANE_W_TILDE, 0, N)
    return BrownianGrid(T, dW, dWt, stream.seed, ids, 0)


def coarsen(grid: BrownianGrid) -> BrownianGrid:
    """Sum adjacent increment pairs: step ``m`` becomes ``2m + (2m+1)``."""
    if grid.n_steps % 2:
        raise ValueError(f"cannot coarsen a grid with odd step count {grid.n_steps}")
    dW = grid.dW[0::2] + grid.dW[1::2]
    dWt = grid.dW_tilde[0::2] + grid.dW_tilde[1::2]
    return BrownianGrid(grid.horizon, dW, dWt, grid.seed, grid.path_ids, grid.level - 1)
