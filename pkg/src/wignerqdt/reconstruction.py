"""Pointwise Wigner reconstruction, noise averaging and robust curve fitting."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.linalg import qr, solve_triangular

from .detectors import PovmElement, analytic_wigner
from .forward import (
    NoiseConfig,
    PhaseGrid,
    ResponseMatrix,
    ThermalProbeSet,
    apply_lo_noise,
    build_response_matrix,
    response_table,
)
from .qp import (
    FockResponseVector,
    NonConvergenceError,
    QpProblem,
    alternating_signs,
    solve,
    solve_unsquared,
)

TWO_OVER_PI = 2.0 / math.pi


class UnderdeterminedFitError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 1e-3
    tol: float = 1e-9
    max_iter: int | None = None
    warm_start: bool = False
    form: str = "squared"

    def __post_init__(self):
        if self.gamma < 0 or self.tol <= 0:
            raise ValueError("gamma must be >= 0 and tol > 0")
        if self.form not in ("squared", "unsquared"):
            raise ValueError(f"unknown objective form {self.form!r}")


@dataclass
class WignerEstimate:
    """Averaged pointwise Wigner values at the nominal grid displacements."""

    outcome_index: int
    alphas: np.ndarray
    mean: np.ndarray
    spread: np.ndarray
    counts: np.ndarray
    unusable: np.ndarray
    gamma: float
    iterations_used: int
    failures: list = field(default_factory=list)
    samples: np.ndarray | None = None
    reports: list = field(default_factory=list)

    @property
    def points(self):
        return list(zip(self.alphas.tolist(), self.mean.tolist(), self.spread.tolist()))

    @property
    def usable(self) -> np.ndarray:
        return ~self.unusable


@dataclass
class FitResult:
    """Gaussian-modulated polynomial ``exp(-2 alpha^2) * sum_j c_j alpha^j``."""

    coefficients: np.ndarray
    cheb_coefficients: np.ndarray
    half_width: float
    degree: int
    loss_value: float
    converged: bool
    iterations: int
    symmetric: bool = False
    scale: float = 1.0
    loss: str = "soft_l1"

    @classmethod
    def from_dict(cls, d: dict) -> FitResult:
        return cls(np.array(d["coefficients"], dtype=float),
                   np.array(d["cheb_coefficients"], dtype=float), float(d["half_width"]),
                   int(d["degree"]), float(d["loss_value"]), bool(d["converged"]),
                   int(d["iterations"]), bool(d.get("symmetric", False)),
                   float(d.get("scale", 1.0)), d.get("loss", "soft_l1"))

    def polynomial(self, alpha):
        return C.chebval(np.asarray(alpha, dtype=float) / self.half_width, self.cheb_coefficients)

    def __call__(self, alpha):
        a = np.asarray(alpha, dtype=float)
        return np.exp(-2.0 * a * a) * self.polynomial(a)

    def dense(self, lo: float, hi: float, count: int = 401):
        a = np.linspace(lo, hi, count)
        return a, self(a)

    def as_dict(self) -> dict:
        return {
            "degree": self.degree,
            "coefficients": self.coefficients.tolist(),
            "cheb_coefficients": self.cheb_coefficients.tolist(),
            "half_width": self.half_width,
            "loss_value": self.loss_value,
            "converged": self.converged,
            "iterations": self.iterations,
            "symmetric": self.symmetric,
            "scale": self.scale,
            "loss": self.loss,
        }


@dataclass(frozen=True)
class ErrorReport:
    delta: float
    grid: np.ndarray
    norm_kind: str = "l2"


def wigner_from_response(pi) -> float:
    """(2/pi) * sum_n (-1)^n pi_n for a truncated Fock response vector."""
    e = np.asarray(getattr(pi, "entries", pi), dtype=float)
    return TWO_OVER_PI * float(alternating_signs(e.size) @ e)


def analytic_curve(element: PovmElement, alphas) -> np.ndarray:
    a = np.asarray(alphas)
    return np.asarray(analytic_wigner(element, np.abs(a) ** 2), dtype=float)


def relative_error(theory, recon, grid=None) -> ErrorReport:
    """l2 relative error ||theory - recon|| / ||theory|| over a common grid."""
    t = np.asarray(theory, dtype=float)
    r = np.asarray(recon, dtype=float)
    if t.shape != r.shape:
        raise ValueError(f"grids differ: {t.shape} vs {r.shape}")
    nt = np.linalg.norm(t)
    if nt == 0.0:
        raise UndefinedMetricError("theory curve has zero norm")
    g = np.arange(t.size) if grid is None else np.asarray(grid)
    return ErrorReport(float(np.linalg.norm(t - r) / nt), g)


def min_points_required(m0: int, exploit_symmetry: bool = False) -> int:
    if m0 < 0:
        raise ValueError("m0 must be non-negative")
    return m0 + 1 if exploit_symmetry else 2 * m0 + 1


def _solve_one(P, q, alpha, k, cfg: SolverConfig, warm):
    pb = QpProblem(P, q, cfg.gamma, alpha=alpha, outcome_index=k)
    if cfg.form == "unsquared":
        return solve_unsquared(pb, cfg.tol, cfg.max_iter)
    return solve(pb, cfg.tol, cfg.max_iter, warm_start=warm if cfg.warm_start else None)


def solve_grid(P, Q, alphas, cfg: SolverConfig, k: int = 0):
    """Solve every row of Q (one per displacement); warm starts run along the grid.

    Returns ``(values, reports, failed)`` with NaN values where the solver
    did not converge.
    """
    values = np.full(len(alphas), np.nan)
    reports, failed = [], []
    warm = None
    for i, a in enumerate(alphas):
        try:
            vec, rep = _solve_one(P, Q[i], a, k, cfg, warm)
        except NonConvergenceError as exc:
            reports.append(exc.report)
            failed.append(i)
            warm = None
            continue
        values[i] = wigner_from_response(vec)
        reports.append(rep)
        warm = vec
    return values, reports, failed


def _iteration_task(args):
    weights, tail, k, probes, grid, noise, it, cfg, shots = args
    resp = build_response_matrix(probes)
    actual = apply_lo_noise(grid, noise, it).alphas
    Q = np.array([np.clip(resp.full @ response_table(weights, a, probes.pmf_cutoff, tail),
                          0.0, 1.0) for a in actual])
    if shots:
        Q = _shot_sample(Q, shots, noise.seed, it, k)
    vals, reps, failed = solve_grid(resp.entries, Q, grid.alphas, cfg, k)
    return vals, reps, failed


def _shot_sample(Q, shots, seed, it, k):
    out = np.empty_like(Q)
    for i, row in enumerate(Q):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, it, i, k, 1])))
        out[i] = rng.binomial(shots, row) / shots
    return out


def reconstruct_pointwise(element: PovmElement, probes: ThermalProbeSet, grid: PhaseGrid,
                          noise_cfg: NoiseConfig | None = None,
                          solver_cfg: SolverConfig | None = None,
                          shots: int | None = None, workers: int = 1,
                          keep_reports: bool = True) -> WignerEstimate:
    """Simulate, invert and average the Wigner function of one POVM element.

    Each iteration perturbs the displacements, synthesises click data at the
    perturbed amplitudes and inverts them at the nominal ones. Iterations are
    independent work items; the reduction over them runs in iteration order,
    so results do not depend on ``workers``.
    """
    noise = noise_cfg or NoiseConfig(0.0, 1, 0)
    cfg = solver_cfg or SolverConfig()
    tasks = [(element.weights, element.tail_weight, element.outcome_index, probes, grid, noise,
              it, cfg, shots)
             for it in range(noise.iterations)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_iteration_task, tasks))
    else:
        results = [_iteration_task(t) for t in tasks]
    return _aggregate(element.outcome_index, grid, cfg.gamma, results, keep_reports)


def _solve_task(args):
    P, Q, alphas, cfg, k = args
    return solve_grid(P, Q, alphas, cfg, k)


def reconstruct_from_clicks(clicks, probes: ThermalProbeSet, grid: PhaseGrid, k: int,
                            solver_cfg: SolverConfig | None = None, workers: int = 1,
                            keep_reports: bool = True) -> WignerEstimate:
    """Invert stored click data of shape ``(iterations, grid points, probes)``.

    Each iteration's rows are inverted at the nominal displacements of
    ``grid``; aggregation matches ``reconstruct_pointwise``.
    """
    Q = np.asarray(clicks, dtype=float)
    if Q.ndim != 3 or Q.shape[1] != len(grid) or Q.shape[2] != probes.n0 + 1:
        raise ValueError(f"click array shape {Q.shape} does not match "
                         f"(iterations, {len(grid)}, {probes.n0 + 1})")
    cfg = solver_cfg or SolverConfig()
    P = build_response_matrix(probes).entries
    tasks = [(P, Q[it], grid.alphas, cfg, k) for it in range(Q.shape[0])]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_solve_task, tasks))
    else:
        results = [_solve_task(t) for t in tasks]
    return _aggregate(k, grid, cfg.gamma, results, keep_reports)


def _aggregate(k, grid, gamma, results, keep_reports=True) -> WignerEstimate:
    samples = np.array([r[0] for r in results])  # (iterations, points)
    n_it = samples.shape[0]
    ok = np.isfinite(samples)
    counts = ok.sum(axis=0)
    mean = np.full(samples.shape[1], np.nan)
    spread = np.zeros(samples.shape[1])
    for i in range(samples.shape[1]):
        col = samples[ok[:, i], i]
        if col.size:
            mean[i] = math.fsum(col) / col.size
            spread[i] = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
    unusable = (n_it - counts) * 2 >= n_it
    failures = [(float(grid.alphas[i]), it) for it, r in enumerate(results) for i in r[2]]
    reports = [r[1] for r in results] if keep_reports else []
    return WignerEstimate(k, np.array(grid.alphas), mean, spread, counts, unusable,
                          gamma, n_it, failures, samples, reports)


def _soft_l1(z):
    return 2.0 * (np.sqrt(1.0 + z) - 1.0)


def _weighted_lstsq(T, z, d):
    """min ||diag(d) (T c - z)|| by Householder QR on rows sorted by weight.

    The Gaussian weights span many decades across the grid; sorting rows by
    decreasing weight keeps the QR solve accurate where a plain SVD solve
    would lose the lightly weighted rows in round-off.
    """
    order = np.argsort(-d, kind="stable")
    A = (d[:, None] * T)[order]
    b = (d * z)[order]
    Q, R = qr(A, mode="economic")
    return solve_triangular(R, Q.T @ b)


def robust_gaussian_poly_fit(alphas, values, degree: int, symmetric: bool = False,
                             scale: float = 1.0, loss: str = "soft_l1",
                             max_iter: int = 500, tol: float = 1e-13) -> FitResult:
    """Fit ``exp(-2 alpha^2) Poly(degree, alpha)`` under the soft-L1 loss.

    Minimises ``1/2 sum_i scale^2 L(r_i^2 / scale^2)`` with
    ``L(y) = 2 (sqrt(1 + y) - 1)`` by iteratively reweighted least squares.
    Each reweighted solve is a majorise-minimise step, so the loss never
    increases; a halving line search guards against round-off. With
    ``symmetric`` only even powers are fitted and only alpha >= 0 samples
    are used. ``loss="linear"`` gives plain least squares.
    """
    a = np.asarray(alphas, dtype=float)
    y = np.asarray(values, dtype=float)
    if a.shape != y.shape:
        raise ValueError("alphas and values differ in length")
    if degree < 0 or (symmetric and degree % 2):
        raise ValueError("degree must be non-negative (and even in symmetric mode)")
    keep = np.isfinite(y) & ((a >= 0) if symmetric else True)
    a, y = a[keep], y[keep]
    n_basis = degree // 2 + 1 if symmetric else degree + 1
    if np.unique(a).size < n_basis:
        raise UnderdeterminedFitError(
            f"need {n_basis} distinct displacements for degree {degree}, got {np.unique(a).size}")
    h = float(np.max(np.abs(a))) or 1.0
    orders = np.arange(0, degree + 1, 2) if symmetric else np.arange(degree + 1)
    T = C.chebvander(a / h, degree)[:, orders]
    g = np.exp(-2.0 * a * a)
    if np.any(g == 0.0):
        raise ValueError("displacements too large: Gaussian factor underflows")
    B = g[:, None] * T
    z = y / g

    def objective(c):
        r = B @ c - y
        if loss == "linear":
            return 0.5 * float(r @ r)
        return 0.5 * scale**2 * float(np.sum(_soft_l1((r / scale) ** 2)))

    c = _weighted_lstsq(T, z, g)
    f = objective(c)
    converged = loss == "linear"
    it = 0
    while not converged and it < max_iter:
        it += 1
        r = B @ c - y
        w = 1.0 / np.sqrt(1.0 + (r / scale) ** 2)
        c_new = _weighted_lstsq(T, z, g * np.sqrt(w))
        step = c_new - c
        f_new = objective(c_new)
        t = 1.0
        while f_new > f and t > 1e-6:
            t *= 0.5
            c_new = c + t * step
            f_new = objective(c_new)
        if f_new > f:
            converged = True
            break
        change = np.linalg.norm(c_new - c) / max(1.0, np.linalg.norm(c))
        c, f_prev, f = c_new, f, f_new
        if change <= tol or f_prev - f <= tol * max(f, 1e-300):
            converged = True

    cheb = np.zeros(degree + 1)
    cheb[orders] = c
    power = C.cheb2poly(cheb) / h ** np.arange(degree + 1)
    if symmetric:
        power[1::2] = 0.0
    return FitResult(power, cheb, h, degree, f, converged, it, symmetric, scale, loss)


def fit_estimate(est: WignerEstimate, fit_m0: int, symmetric: bool = False, **kw) -> FitResult:
    """Robust fit of the usable averaged points of an estimate."""
    use = est.usable & np.isfinite(est.mean)
    return robust_gaussian_poly_fit(est.alphas[use], est.mean[use], 2 * fit_m0,
                                    symmetric=symmetric, **kw)


def gamma_sweep(element: PovmElement, probes: ThermalProbeSet, grid: PhaseGrid,
                noise_cfg: NoiseConfig, gammas, solver_cfg: SolverConfig | None = None,
                theory=None, workers: int = 1):
    """Relative error of the averaged reconstruction for each gamma (shared seed)."""
    gammas = [float(g) for g in gammas]
    if any(g < 0 for g in gammas):
        raise ValueError("gammas must be non-negative")
    base = solver_cfg or SolverConfig()
    theory = analytic_curve(element, grid.alphas) if theory is None else np.asarray(theory)
    out = []
    for g in gammas:
        est = reconstruct_pointwise(element, probes, grid, noise_cfg, replace(base, gamma=g),
                                    workers=workers, keep_reports=False)
        use = est.usable
        out.append((g, relative_error(theory[use], est.mean[use]).delta))
    return out
