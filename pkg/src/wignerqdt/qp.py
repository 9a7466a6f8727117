"""Constrained Tikhonov least squares for the per-displacement inversion.

Minimises ``||q - P x||^2 + gamma^2 ||x||^2`` over the box ``0 <= x <= 1``
intersected with the slab ``-1 <= sum_n (-1)^n x_n <= 1``.

The solver is a primal active-set method working on the stacked
least-squares system ``[P; gamma I] x ~ [q; 0]`` rather than on the normal
equations, which keeps the subproblem condition number at cond(P) instead
of cond(P)^2. Subproblems with the slab active are reduced to an
unconstrained least-squares problem on the null space of the slab row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TIE_BREAK_GAMMA = 1e-12
FEAS_TOL = 1e-12
MULT_TOL = 1e-16


class NonConvergenceError(RuntimeError):
    """Iteration cap reached without meeting the KKT tolerance."""

    def __init__(self, message, best, report):
        super().__init__(message)
        self.best = best
        self.report = report


class InfeasibleError(ValueError):
    def __init__(self, max_violation):
        super().__init__(f"candidate violates constraints by {max_violation:.3e}")
        self.max_violation = max_violation


@dataclass(frozen=True, eq=False)
class FockResponseVector:
    """Probabilities of outcome k for displaced Fock inputs |n>, n = 0..n0."""

    entries: np.ndarray
    alpha: complex = 0.0
    outcome_index: int = 0

    @property
    def n0(self) -> int:
        return len(self.entries) - 1

    @property
    def alternating_sum(self) -> float:
        return float(np.dot(alternating_signs(len(self.entries)), self.entries))


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    gamma: float = 1e-3
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    slab: tuple[float, float] = (-1.0, 1.0)
    alpha: complex = 0.0
    outcome_index: int = 0

    def __post_init__(self):
        self.P = np.asarray(getattr(self.P, "entries", self.P), dtype=float)
        self.q = np.asarray(getattr(self.q, "q", self.q), dtype=float)
        if self.P.ndim != 2 or self.q.shape != (self.P.shape[0],):
            raise ValueError(f"shape mismatch: P {self.P.shape}, q {self.q.shape}")
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        n = self.P.shape[1]
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.ones(n) if self.upper is None else np.asarray(self.upper, float)
        if np.any(self.lower > self.upper) or self.slab[0] > self.slab[1]:
            raise ValueError("empty feasible region")

    @property
    def n(self) -> int:
        return self.P.shape[1]

    @property
    def signs(self) -> np.ndarray:
        return alternating_signs(self.n)

    def objective(self, x) -> float:
        r = self.P @ x - self.q
        return float(r @ r + self.gamma**2 * (x @ x))

    def gradient(self, x) -> np.ndarray:
        return 2.0 * (self.P.T @ (self.P @ x - self.q) + self.gamma**2 * x)

    def violation(self, x) -> float:
        s = self.signs @ x
        return float(max(
            np.max(self.lower - x, initial=0.0),
            np.max(x - self.upper, initial=0.0),
            self.slab[0] - s,
            s - self.slab[1],
            0.0,
        ))


@dataclass
class SolverReport:
    objective_value: float
    kkt_residual: float
    iterations: int
    at_lower: int
    at_upper: int
    slab_state: int
    gamma_internal: float
    tie_break: bool = False
    fallback: bool = False
    converged: bool = True
    notes: list[str] = field(default_factory=list)

    @property
    def active_constraints(self) -> str:
        slab = {0: "slab inactive", 1: "slab at +1", -1: "slab at -1"}[self.slab_state]
        return f"{self.at_lower} at 0, {self.at_upper} at 1, {slab}"

    def as_dict(self) -> dict:
        return {
            "objective_value": self.objective_value,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "at_lower": self.at_lower,
            "at_upper": self.at_upper,
            "slab_state": self.slab_state,
            "gamma_internal": self.gamma_internal,
            "tie_break": self.tie_break,
            "fallback": self.fallback,
            "converged": self.converged,
        }


def alternating_signs(n: int) -> np.ndarray:
    return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)


def project_feasible(z, lower, upper, signs, slab=(-1.0, 1.0)) -> np.ndarray:
    """Euclidean projection onto the box intersected with the slab.

    The projection is ``clip(z - mu * s)`` for the scalar multiplier mu that
    puts ``s . x`` back inside the slab; ``s . clip(z - mu s)`` is piecewise
    linear and non-increasing in mu, so mu is found exactly from its
    breakpoints.
    """
    z = np.asarray(z, dtype=float)

    def phi(mu):
        return signs @ np.clip(z - mu * signs, lower, upper)

    x0 = np.clip(z, lower, upper)
    s0 = signs @ x0
    if slab[0] <= s0 <= slab[1]:
        return x0
    target = slab[1] if s0 > slab[1] else slab[0]
    bps = np.concatenate([(z - lower) * signs, (z - upper) * signs])
    bps = np.unique(bps[bps > 0] if s0 > slab[1] else bps[bps < 0])
    bps = np.concatenate([[0.0], bps]) if s0 > slab[1] else np.concatenate([bps, [0.0]])
    vals = np.array([phi(mu) for mu in bps])
    # vals is non-increasing in mu; find consecutive breakpoints bracketing target
    idx = np.nonzero((vals[:-1] - target) * (vals[1:] - target) <= 0)[0]
    if idx.size == 0:
        # slab unreachable within the box; fall back to the closest extreme
        mu = bps[-1] if s0 > slab[1] else bps[0]
        return np.clip(z - mu * signs, lower, upper)
    i = idx[0]
    m0, m1, v0, v1 = bps[i], bps[i + 1], vals[i], vals[i + 1]
    mu = m0 if v1 == v0 else m0 + (target - v0) * (m1 - m0) / (v1 - v0)
    return np.clip(z - mu * signs, lower, upper)


def kkt_residual(problem: QpProblem, candidate) -> float:
    """Projected-gradient stationarity residual ``||x - Proj(x - grad f(x))||``.

    Zero exactly at the minimiser of the convex problem.
    """
    x = np.asarray(getattr(candidate, "entries", candidate), dtype=float)
    viol = problem.violation(x)
    if viol > FEAS_TOL:
        raise InfeasibleError(viol)
    g = problem.gradient(x)
    p = project_feasible(x - g, problem.lower, problem.upper, problem.signs, problem.slab)
    return float(np.linalg.norm(x - p))


def condition_report(P) -> float:
    """Ratio of extreme singular values of P (inf when exactly singular).

    Values beyond ~1/eps are not resolved by a double-precision SVD and
    should be read as lower bounds.
    """
    P = np.asarray(getattr(P, "entries", P), dtype=float)
    sv = np.linalg.svd(P, compute_uv=False)
    if sv.size == 0 or sv[-1] == 0.0:
        return math.inf
    return float(sv[0] / sv[-1])


class _ActiveSet:
    """State of one active-set run; kept separate so the loop reads linearly."""

    def __init__(self, problem: QpProblem, lam: float):
        self.pb = problem
        n = problem.n
        self.A = np.vstack([problem.P, lam * np.eye(n)])
        self.b = np.concatenate([problem.q, np.zeros(n)])
        self.s = problem.signs
        self.lo, self.up = problem.lower, problem.upper
        self.lam = lam

    def grad(self, x):
        return 2.0 * (self.A.T @ (self.A @ x - self.b))

    def subproblem(self, x, st, slab_state):
        """Minimiser over the free variables with fixed ones held at their bounds."""
        free = st == 0
        p = np.where(st < 0, self.lo, np.where(st > 0, self.up, x))
        if not free.any():
            return p
        Af = self.A[:, free]
        rhs = self.b - self.A[:, ~free] @ p[~free]
        if slab_state == 0:
            p[free] = np.linalg.lstsq(Af, rhs, rcond=None)[0]
            return p
        target = self.pb.slab[1] if slab_state > 0 else self.pb.slab[0]
        sf = self.s[free]
        t = target - self.s[~free] @ p[~free]
        c0 = sf * (t / (sf @ sf))
        if sf.size == 1:
            p[free] = c0
            return p
        Q, _ = np.linalg.qr(sf[:, None], mode="complete")
        Z = Q[:, 1:]
        y = np.linalg.lstsq(Af @ Z, rhs - Af @ c0, rcond=None)[0]
        p[free] = c0 + Z @ y
        return p

    def multipliers(self, x, st, slab_state):
        """Reduced gradients of fixed variables and the slab multiplier."""
        g = self.grad(x)
        free = st == 0
        sigma = float(slab_state)
        mu = 0.0
        if slab_state != 0:
            if free.any():
                sf = self.s[free]
                mu = -sigma * float(sf @ g[free]) / float(sf @ sf)
            else:
                mu = self._slab_mu_from_bounds(g, st, sigma)
        d = g + mu * sigma * self.s
        return d, mu

    def _slab_mu_from_bounds(self, g, st, sigma):
        # every variable fixed: choose the mu >= 0 that best satisfies the bound signs
        cands = [0.0]
        for i in np.nonzero(st != 0)[0]:
            cands.append(-g[i] / (sigma * self.s[i]))
        best, best_v = 0.0, math.inf
        for mu in cands:
            if mu < 0:
                continue
            d = g + mu * sigma * self.s
            v = max(np.max(-d[st < 0], initial=0.0), np.max(d[st > 0], initial=0.0))
            if v < best_v:
                best, best_v = mu, v
        return best

    def max_step(self, x, p, st, slab_state):
        """Largest t in [0, 1] keeping x + t (p - x) feasible, and what blocks it."""
        d = p - x
        t_best, block = 1.0, None
        free = np.nonzero(st == 0)[0]
        for i in free:
            if d[i] < 0 and p[i] < self.lo[i]:
                t = (self.lo[i] - x[i]) / d[i]
                if t < t_best:
                    t_best, block = t, (i, -1)
            elif d[i] > 0 and p[i] > self.up[i]:
                t = (self.up[i] - x[i]) / d[i]
                if t < t_best:
                    t_best, block = t, (i, 1)
        if slab_state == 0:
            sx, sd = self.s @ x, self.s @ d
            lo, hi = self.pb.slab
            if sd > 0 and sx + sd > hi:
                t = (hi - sx) / sd
                if t < t_best:
                    t_best, block = t, ("slab", 1)
            elif sd < 0 and sx + sd < lo:
                t = (lo - sx) / sd
                if t < t_best:
                    t_best, block = t, ("slab", -1)
        return max(t_best, 0.0), block


def solve(problem: QpProblem, tol: float = 1e-9, max_iter: int | None = None,
          warm_start=None) -> tuple[FockResponseVector, SolverReport]:
    """Minimise the Tikhonov objective over box and alternating-sum slab.

    ``warm_start`` is only a hint: it is projected onto the feasible set and
    the run continues to the same KKT tolerance as a cold start.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = problem.n
    tie_break = problem.gamma == 0.0
    lam = TIE_BREAK_GAMMA if tie_break else problem.gamma
    max_iter = max_iter or 10 * n + 50
    ws = _ActiveSet(problem, lam)
    notes = ["gamma=0: added 1e-12 ridge for a minimum-norm tie-break"] if tie_break else []

    if warm_start is None:
        x = np.clip(np.zeros(n), problem.lower, problem.upper)
    else:
        x0 = np.asarray(getattr(warm_start, "entries", warm_start), dtype=float)
        x = project_feasible(x0, problem.lower, problem.upper, ws.s, problem.slab)
    x = project_feasible(x, problem.lower, problem.upper, ws.s, problem.slab)
    st = np.where(x <= problem.lower, -1, np.where(x >= problem.upper, 1, 0))
    sx = ws.s @ x
    slab_state = 1 if sx >= problem.slab[1] else (-1 if sx <= problem.slab[0] else 0)

    # multipliers near round-off level still matter on these tiny objectives
    mult_tol = min(0.1 * tol, MULT_TOL)
    seen: set = set()
    bland = False
    it = 0
    optimal = False
    while it < max_iter:
        it += 1
        p = ws.subproblem(x, st, slab_state)
        t, block = ws.max_step(x, p, st, slab_state)
        if block is not None:
            x = x + t * (p - x)
            idx, side = block
            if idx == "slab":
                slab_state = side
            else:
                st[idx] = side
                x[idx] = problem.lower[idx] if side < 0 else problem.upper[idx]
            continue
        x = p
        free = st == 0
        x[free] = np.clip(x[free], problem.lower[free], problem.upper[free])
        d, mu = ws.multipliers(x, st, slab_state)
        viol = np.zeros(n)
        viol[st < 0] = np.maximum(-d[st < 0], 0.0)
        viol[st > 0] = np.maximum(d[st > 0], 0.0)
        slab_viol = max(-mu, 0.0) if slab_state != 0 else 0.0
        worst = float(max(viol.max(initial=0.0), slab_viol))
        if worst <= mult_tol:
            optimal = True
            break
        key = (tuple(st), slab_state)
        if key in seen:
            bland = True
        seen.add(key)
        if slab_viol > mult_tol and (slab_viol >= viol.max(initial=0.0) or bland and not (viol > mult_tol).any()):
            slab_state = 0
        elif bland:
            st[int(np.nonzero(viol > mult_tol)[0][0])] = 0
        else:
            st[int(np.argmax(viol))] = 0

    fallback = False
    res = kkt_residual(problem, x)
    if res > tol:
        x, res = _polish(problem, x, tol)
        fallback = True
        notes.append("projected-gradient polish after active-set stall")

    report = SolverReport(
        objective_value=problem.objective(x),
        kkt_residual=res,
        iterations=it,
        at_lower=int(np.sum(x <= problem.lower)),
        at_upper=int(np.sum(x >= problem.upper)),
        slab_state=int(np.sign(round(ws.s @ x, 12))) if abs(ws.s @ x) >= 1 - FEAS_TOL else 0,
        gamma_internal=lam,
        tie_break=tie_break,
        fallback=fallback,
        converged=res <= tol,
        notes=notes,
    )
    vec = FockResponseVector(x, problem.alpha, problem.outcome_index)
    if res > tol:
        raise NonConvergenceError(
            f"KKT residual {res:.3e} above tol {tol:.1e} after {it} iterations"
            + ("" if optimal else " (iteration cap)"),
            vec, report,
        )
    return vec, report


def _polish(problem: QpProblem, x, tol, max_iter=20000):
    """Accelerated projected gradient from x; returns the best iterate seen."""
    L = 2.0 * (np.linalg.norm(problem.P, 2) ** 2 + problem.gamma**2)
    s = problem.signs
    proj = lambda z: project_feasible(z, problem.lower, problem.upper, s, problem.slab)
    y, x_prev, tk = x.copy(), x.copy(), 1.0
    best, best_res = x.copy(), kkt_residual(problem, x)
    for k in range(max_iter):
        x_new = proj(y - problem.gradient(y) / L)
        tk_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        y = x_new + ((tk - 1) / tk_new) * (x_new - x_prev)
        x_prev, tk = x_new, tk_new
        if k % 50 == 0:
            r = kkt_residual(problem, x_new)
            if r < best_res:
                best, best_res = x_new.copy(), r
            if r <= tol:
                break
    return best, best_res


def solve_unsquared(problem: QpProblem, tol: float = 1e-9, max_iter: int | None = None,
                    bisections: int = 60) -> tuple[FockResponseVector, SolverReport]:
    """Minimise ``||q - P x|| + gamma ||x||`` (norms not squared) on the same set.

    At an optimum with non-zero residual and iterate the stationarity
    conditions coincide with those of the squared problem at ridge weight
    ``lam^2 = gamma ||r|| / ||x||``; lam is located by bisection in log space
    and the squared problem at that weight is solved to ``tol``.
    """
    if problem.gamma == 0.0:
        return solve(problem, tol, max_iter)

    def at(lam):
        pb = QpProblem(problem.P, problem.q, lam, problem.lower, problem.upper, problem.slab,
                       problem.alpha, problem.outcome_index)
        vec, rep = solve(pb, tol, max_iter)
        x = vec.entries
        r = np.linalg.norm(problem.P @ x - problem.q)
        return vec, rep, lam * lam * np.linalg.norm(x) - problem.gamma * r

    lo, hi = -14.0, 4.0
    best = at(10.0**hi)
    if best[2] < 0:
        # ridge never balances the residual: the zero vector is optimal
        x = np.clip(np.zeros(problem.n), problem.lower, problem.upper)
        rep = best[1]
        rep.notes.append("unsquared form: zero solution")
        return FockResponseVector(x, problem.alpha, problem.outcome_index), rep
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        cur = at(10.0**mid)
        if cur[2] < 0:
            lo = mid
        else:
            hi, best = mid, cur
        if hi - lo < 1e-6:
            break
    vec, rep, _ = best
    rep.notes.append(f"unsquared form: equivalent ridge {10.0**hi:.3e}")
    return vec, rep
