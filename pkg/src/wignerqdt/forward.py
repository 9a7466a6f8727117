"""Forward model: displaced thermal probes incident on a diagonal-POVM detector."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .detectors import DetectorModel, PovmElement
from .fockspace import TAIL_TOL, overlap_matrix, thermal_cutoff, thermal_pmf, thermal_tail
from .qp import FockResponseVector, condition_report


class SingularSystemError(ValueError):
    """Probe set produces a singular response matrix (repeated mean photon numbers)."""


class TruncationWarning(UserWarning):
    """Omitted Fock or thermal mass exceeds the configured tail tolerance."""


@dataclass(frozen=True, eq=False)
class ThermalProbeSet:
    """Mean photon numbers of the n0 + 1 thermal probes.

    ``pmf_cutoff`` is the photon number up to which synthetic click data are
    expanded; it defaults to the smallest cutoff whose thermal tail at the
    brightest probe is below ``tail_tol``.
    """

    nbars: np.ndarray
    pmf_cutoff: int | None = None
    tail_tol: float = TAIL_TOL

    def __post_init__(self):
        nb = np.array(self.nbars, dtype=float)
        nb.setflags(write=False)
        if nb.ndim != 1 or nb.size == 0:
            raise ValueError("nbars must be a non-empty vector")
        if nb[0] < 0 or np.any(np.diff(nb) < 0):
            raise ValueError("nbars must be non-negative and sorted ascending")
        object.__setattr__(self, "nbars", nb)
        if self.pmf_cutoff is None:
            cut = max(nb.size - 1, thermal_cutoff(float(nb[-1]), self.tail_tol))
            object.__setattr__(self, "pmf_cutoff", cut)
        elif self.pmf_cutoff < nb.size - 1:
            raise ValueError("pmf_cutoff must be at least n0")

    @classmethod
    def uniform(cls, count: int = 50, lo: float = 0.0, hi: float = 4.0, **kw):
        return cls(np.linspace(lo, hi, count), **kw)

    @property
    def n0(self) -> int:
        return self.nbars.size - 1

    def tail_masses(self, n_max: int | None = None) -> np.ndarray:
        n_max = self.pmf_cutoff if n_max is None else n_max
        return np.array([thermal_tail(v, n_max) for v in self.nbars])


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """Square thermal response matrix P[j, n] = p_n^(j), n <= n0.

    ``full`` extends the rows to ``pmf_cutoff`` for synthesising data.
    """

    entries: np.ndarray
    full: np.ndarray
    condition_estimate: float

    @property
    def row_mass(self) -> np.ndarray:
        return self.entries.sum(axis=1)


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    alphas: np.ndarray

    def __post_init__(self):
        a = np.array(self.alphas)
        if a.ndim != 1 or a.size == 0 or not np.all(np.isfinite(a)):
            raise ValueError("grid must be a non-empty vector of finite values")
        if np.unique(a).size != a.size:
            raise ValueError("grid values must be distinct")
        a.setflags(write=False)
        object.__setattr__(self, "alphas", a)

    @classmethod
    def uniform(cls, count: int = 51, lo: float = -3.6, hi: float = 3.6):
        a = np.linspace(lo, hi, count)
        if lo == -hi:
            # exact mirror symmetry; the inversion amplifies last-bit asymmetries
            a = 0.5 * (a - a[::-1])
        return cls(a)

    @classmethod
    def dense_origin(cls, count: int = 51, lo: float = -3.6, hi: float = 3.6,
                     stretch: float = 2.0):
        """Points crowded near the origin, sparse at large |alpha| (sinh spacing)."""
        t = np.linspace(-1.0, 1.0, count)
        half = max(abs(lo), abs(hi))
        a = half * np.sinh(stretch * t) / math.sinh(stretch)
        a = 0.5 * (a - a[::-1])
        return cls(a[(a >= lo - 1e-12) & (a <= hi + 1e-12)])

    def __len__(self):
        return self.alphas.size


@dataclass(frozen=True, eq=False)
class ClickStatistics:
    """Outcome-k probabilities (or frequencies) for each probe at one displacement."""

    alpha: complex
    q: np.ndarray
    outcome_index: int
    alpha_actual: complex | None = None
    shots: int | None = None
    nbars: np.ndarray | None = None

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if np.any(q < -1e-12) or np.any(q > 1 + 1e-12):
            raise ValueError("click probabilities must lie in [0, 1]")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        if self.alpha_actual is None:
            object.__setattr__(self, "alpha_actual", self.alpha)


@dataclass(frozen=True)
class NoiseConfig:
    """Local-oscillator amplitude noise: delta ~ Normal(0, sigma_fraction * alpha^2)."""

    sigma_fraction: float = 0.01
    iterations: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.sigma_fraction < 0:
            raise ValueError("sigma_fraction must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


def build_response_matrix(probes: ThermalProbeSet) -> ResponseMatrix:
    nb = probes.nbars
    if np.unique(nb).size != nb.size:
        raise SingularSystemError("repeated mean photon numbers give identical rows")
    full = np.array([thermal_pmf(v, probes.pmf_cutoff) for v in nb])
    sq = full[:, : probes.n0 + 1].copy()
    return ResponseMatrix(sq, full, condition_report(sq))


def _alpha_sq(alpha) -> float:
    return float(abs(alpha) ** 2)


def responses_from_overlap(weights, O: np.ndarray, tail=0.0) -> np.ndarray:
    """Fock responses from a precomputed overlap matrix ``O[m, n]``, m <= m0.

    ``tail`` is the weight of the element on every photon number above m0
    (1 for a saturating overflow outcome, 0 otherwise); that part is the
    probability ``1 - sum_{m <= m0} O[m, n]`` of landing beyond the cutoff.
    """
    w = np.asarray(weights, dtype=float)
    out = w @ O if w.ndim == 1 else w.T @ O
    t = np.asarray(tail, dtype=float)
    if np.any(t):
        beyond = np.clip(1.0 - O.sum(axis=0), 0.0, 1.0)
        out = out + (t * beyond if out.ndim == 1 else t[:, None] * beyond[None, :])
    return out


def response_table(weights, alpha, n_max: int, tail=0.0) -> np.ndarray:
    """Fock responses for one or several diagonal POVM elements.

    ``weights`` has shape ``(m0 + 1,)`` or ``(m0 + 1, K)``; the result has
    shape ``(n_max + 1,)`` or ``(K, n_max + 1)``.
    """
    w = np.asarray(weights, dtype=float)
    O = overlap_matrix(w.shape[0] - 1, n_max, _alpha_sq(alpha))
    return responses_from_overlap(w, O, tail)


def omitted_response(weights, alpha, n_max: int) -> float:
    """Response mass sum_{n > n_max} P^(n)(alpha) lost by truncating at n_max."""
    w = np.asarray(weights, dtype=float)
    O = overlap_matrix(w.size - 1, n_max, _alpha_sq(alpha))
    row_missing = np.clip(1.0 - O.sum(axis=1), 0.0, None)
    return float(w @ row_missing)


def fock_response_vector(element: PovmElement, alpha, n0: int,
                         tail_tol: float = TAIL_TOL) -> FockResponseVector:
    """Ground-truth P^(n)(alpha) = sum_m w_m |<m|D(alpha)|n>|^2 for n = 0..n0."""
    vec = response_table(element.weights, alpha, n0, element.tail_weight)
    # the overflow part of a saturating element is not a truncation loss
    tail = omitted_response(element.weights, alpha, n0)
    if tail > tail_tol:
        warnings.warn(
            f"alpha={alpha}: omitted response mass {tail:.2e} beyond n={n0}",
            TruncationWarning, stacklevel=2,
        )
    return FockResponseVector(np.clip(vec, 0.0, 1.0), alpha, element.outcome_index)


def click_statistics(element: PovmElement, probes: ThermalProbeSet, alpha,
                     alpha_actual=None, response: ResponseMatrix | None = None) -> ClickStatistics:
    """Click probabilities of every probe displaced by ``alpha_actual``.

    The thermal expansion runs to ``probes.pmf_cutoff`` rather than n0, so
    the data carry the genuine truncation error the inversion has to absorb.
    """
    actual = alpha if alpha_actual is None else alpha_actual
    resp = response or build_response_matrix(probes)
    tail = float(probes.tail_masses().max())
    if tail > probes.tail_tol:
        warnings.warn(f"thermal tail mass {tail:.2e} beyond n={probes.pmf_cutoff}",
                      TruncationWarning, stacklevel=2)
    pi = response_table(element.weights, actual, probes.pmf_cutoff, element.tail_weight)
    q = np.clip(resp.full @ pi, 0.0, 1.0)
    return ClickStatistics(alpha, q, element.outcome_index, actual, None, probes.nbars)


def click_table(model: DetectorModel, probes: ThermalProbeSet, alpha_actual,
                response: ResponseMatrix | None = None) -> np.ndarray:
    """Click probabilities for every outcome column: shape ``(n_columns, n_probes)``."""
    resp = response or build_response_matrix(probes)
    pi = response_table(model.diag, alpha_actual, probes.pmf_cutoff, model.tail)
    return np.clip(pi @ resp.full.T, 0.0, 1.0)


def noise_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, iteration, grid index)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, iteration, index])
    return np.random.Generator(np.random.Philox(ss))


def apply_lo_noise(grid: PhaseGrid, cfg: NoiseConfig, iteration: int) -> PhaseGrid:
    """Perturb each amplitude by Normal(0, sigma_fraction * |alpha|^2).

    Complex displacements are perturbed along their own phase, i.e. only the
    LO amplitude fluctuates.
    """
    if cfg.sigma_fraction == 0.0:
        return grid
    out = np.array(grid.alphas)
    for i, a in enumerate(grid.alphas):
        sigma = cfg.sigma_fraction * abs(a) ** 2
        if sigma == 0.0:
            continue
        delta = noise_rng(cfg.seed, iteration, i).normal(0.0, sigma)
        if np.iscomplexobj(out):
            out[i] = a + delta * np.exp(1j * np.angle(a))
        else:
            out[i] = a + delta
    return _perturbed_grid(out)


def _perturbed_grid(alphas) -> PhaseGrid:
    # perturbed grids may in principle collide; keep the distinctness check off
    g = PhaseGrid.__new__(PhaseGrid)
    a = np.array(alphas)
    a.setflags(write=False)
    object.__setattr__(g, "alphas", a)
    return g


def sample_shots(stats: ClickStatistics, shots: int, seed) -> ClickStatistics:
    """Replace each probability by a Binomial(shots, q) / shots frequency."""
    if shots < 1:
        raise ValueError("shots must be positive")
    key = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
    freq = rng.binomial(shots, np.clip(stats.q, 0.0, 1.0)) / shots
    return replace(stats, q=freq, shots=shots)
