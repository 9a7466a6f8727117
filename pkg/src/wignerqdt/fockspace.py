"""Special functions and single-mode Fock-space numerics.

Everything here is a pure function of its arguments. Laguerre recurrences
accumulate in ``numpy.longdouble`` (80-bit on x86) and factorial ratios are
formed in log space, so degrees up to a few hundred stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import gammaln

MAX_DEGREE = 200
TAIL_TOL = 1e-9

_EXT = np.longdouble


class DegreeOverflowError(ValueError):
    """Requested polynomial degree exceeds the configured maximum."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of the function."""


@dataclass(frozen=True)
class TruncationConfig:
    """Fock-space cutoffs used by the forward model and the inversion.

    ``hilbert_dim`` bounds the photon numbers a detector model may resolve,
    ``n0`` is the last term kept in the alternating Wigner sum (so the
    inversion has ``n0 + 1`` unknowns) and ``m0`` is the detector
    saturation cutoff.
    """

    hilbert_dim: int = 51
    n0: int = 49
    m0: int = 50
    tail_tol: float = TAIL_TOL

    def __post_init__(self):
        if self.hilbert_dim < 1:
            raise ValueError("hilbert_dim must be positive")
        if self.n0 < 0 or self.m0 < 0:
            raise ValueError("n0 and m0 must be non-negative")
        if not (self.hilbert_dim > self.m0 and self.hilbert_dim > self.n0):
            raise ValueError(
                f"hilbert_dim={self.hilbert_dim} must exceed both m0={self.m0} and n0={self.n0}"
            )

    def thermal_tail(self, nbar: float, n_max: int | None = None) -> float:
        return thermal_tail(nbar, self.n0 if n_max is None else n_max)

    def thermal_tail_ok(self, nbar: float, n_max: int | None = None) -> bool:
        return self.thermal_tail(nbar, n_max) <= self.tail_tol


def _check_degree(n: int, max_degree: int = MAX_DEGREE) -> None:
    if n < 0:
        raise DomainError(f"degree must be non-negative, got {n}")
    if n > max_degree:
        raise DegreeOverflowError(f"degree {n} exceeds maximum {max_degree}")


def laguerre_table(n_max: int, k: int, x, max_degree: int = MAX_DEGREE) -> np.ndarray:
    """All associated Laguerre values L_0^(k)(x) .. L_n_max^(k)(x).

    Returns an array of shape ``(n_max + 1,) + np.shape(x)`` in float64.
    """
    _check_degree(n_max, max_degree)
    if k < 0:
        raise DomainError(f"order k must be non-negative, got {k}")
    xe = np.asarray(x, dtype=_EXT)
    out = np.empty((n_max + 1,) + xe.shape, dtype=_EXT)
    prev = np.ones_like(xe)
    out[0] = prev
    if n_max >= 1:
        cur = 1 + k - xe
        out[1] = cur
        for n in range(1, n_max):
            # (n+1) L_{n+1} = (2n+1+k-x) L_n - (n+k) L_{n-1}
            nxt = ((2 * n + 1 + k - xe) * cur - (n + k) * prev) / (n + 1)
            prev, cur = cur, nxt
            out[n + 1] = cur
    return out.astype(np.float64)


def assoc_laguerre(n: int, k: int, x, max_degree: int = MAX_DEGREE):
    """Associated Laguerre polynomial L_n^(k)(x) via the three-term recurrence."""
    val = laguerre_table(n, k, x, max_degree)[n]
    return float(val) if np.ndim(val) == 0 else val


def laguerre(m: int, x, max_degree: int = MAX_DEGREE):
    """Laguerre polynomial L_m(x)."""
    return assoc_laguerre(m, 0, x, max_degree)


def displaced_fock_overlap(m: int, n: int, alpha_sq: float) -> float:
    """|<m|D(alpha)|n>|^2 for |alpha|^2 = alpha_sq.

    Closed form ``e^{-x} (lo!/hi!) x^{|m-n|} [L_lo^{(|m-n|)}(x)]^2``.
    """
    if alpha_sq < 0:
        raise DomainError(f"alpha_sq must be non-negative, got {alpha_sq}")
    if m < 0 or n < 0:
        raise DomainError("Fock indices must be non-negative")
    lo, hi = min(m, n), max(m, n)
    d = hi - lo
    if alpha_sq == 0.0:
        return 1.0 if d == 0 else 0.0
    half_log = 0.5 * (-alpha_sq + gammaln(lo + 1) - gammaln(hi + 1) + d * math.log(alpha_sq))
    amp = math.exp(half_log) * assoc_laguerre(lo, d, alpha_sq, max_degree=max(MAX_DEGREE, lo))
    return amp * amp


def overlap_matrix(m_max: int, n_max: int, alpha_sq: float) -> np.ndarray:
    """Matrix of ``displaced_fock_overlap(m, n, alpha_sq)`` for m <= m_max, n <= n_max.

    Vectorised over the diagonal offset d = |m - n|: one Laguerre recurrence
    per offset yields every entry on that diagonal.
    """
    if alpha_sq < 0:
        raise DomainError(f"alpha_sq must be non-negative, got {alpha_sq}")
    out = np.zeros((m_max + 1, n_max + 1))
    if alpha_sq == 0.0:
        r = min(m_max, n_max) + 1
        out[np.arange(r), np.arange(r)] = 1.0
        return out
    logx = math.log(alpha_sq)
    lg = gammaln(np.arange(max(m_max, n_max) + 2) + 1.0)
    deg_cap = max(MAX_DEGREE, m_max, n_max)
    for d in range(max(m_max, n_max) + 1):
        # entries (lo, lo + d) above the diagonal and (lo + d, lo) below it
        lo_above = min(n_max - d, m_max)
        lo_below = min(m_max - d, n_max)
        lo_top = max(lo_above, lo_below)
        if lo_top < 0:
            continue
        lo = np.arange(lo_top + 1)
        lag = laguerre_table(lo_top, d, alpha_sq, max_degree=deg_cap)
        half_log = 0.5 * (-alpha_sq + lg[lo] - lg[lo + d] + d * logx)
        vals = (np.exp(half_log) * lag) ** 2
        if lo_above >= 0:
            idx = np.arange(lo_above + 1)
            out[idx, idx + d] = vals[: lo_above + 1]
        if d > 0 and lo_below >= 0:
            idx = np.arange(lo_below + 1)
            out[idx + d, idx] = vals[: lo_below + 1]
    return out


def displacement_matrix(alpha: complex, dim: int) -> np.ndarray:
    """D(alpha) = exp(alpha a^dag - alpha^* a) in a truncated Fock basis.

    Exponentiates the truncated generator, so only the leading block well
    below ``dim`` is accurate. Used as a brute-force reference.
    """
    if dim < 2:
        raise ValueError("dim must be at least 2")
    a = np.diag(np.sqrt(np.arange(1, dim, dtype=float)), 1)
    gen = alpha * a.T - np.conj(alpha) * a
    return expm(gen.astype(complex))


def thermal_pmf(nbar: float, n_max: int) -> np.ndarray:
    """Bose-Einstein photon-number distribution p_n = nbar^n / (1 + nbar)^(n+1), n <= n_max."""
    if nbar < 0:
        raise DomainError(f"nbar must be non-negative, got {nbar}")
    ratio = nbar / (1.0 + nbar)
    return ratio ** np.arange(n_max + 1) / (1.0 + nbar)


def thermal_tail(nbar: float, n_max: int) -> float:
    """Probability mass of the thermal distribution above n_max."""
    if nbar < 0:
        raise DomainError(f"nbar must be non-negative, got {nbar}")
    return (nbar / (1.0 + nbar)) ** (n_max + 1)


def thermal_cutoff(nbar_max: float, tol: float = TAIL_TOL) -> int:
    """Smallest n_max whose thermal tail at nbar_max is below tol."""
    if nbar_max <= 0:
        return 0
    ratio = nbar_max / (1.0 + nbar_max)
    return max(0, math.ceil(math.log(tol) / math.log(ratio)) - 1)


def binomial_loss(k: int, m: int, eta: float) -> float:
    """Probability of k clicks from m incident photons at efficiency eta."""
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    if k < 0 or m < 0 or k > m:
        raise DomainError(f"need 0 <= k <= m, got k={k}, m={m}")
    return math.comb(m, k) * eta**k * (1.0 - eta) ** (m - k)
