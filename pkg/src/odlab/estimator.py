"""Bi-level OD-sequence estimator.

Upper level: minimize ``R = alpha * w * N + (1 - alpha) * S`` over the flattened
non-negative sequence with a multiplicative gradient-projection method, where
``N`` is the half sum of squared count residuals under a frozen assignment
tensor, ``S`` the KL mismatch of production/attraction distributions against
target distributions and ``w`` a fixed scale making ``N`` dimensionless.
Lower level: re-simulate the current iterate and back-calculate the
assignment tensor.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import metrics
from .core import ModelError, Network, TimeGrid, production_attraction
from .simulator import back_calculate, simulate

log = logging.getLogger(__name__)

EPS = 1e-12
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class InvariantError(RuntimeError):
    """An iterate left the feasible set; always a bug."""


# ---------------------------------------------------------------------------
# objective pieces


def assignment_matrix(P: np.ndarray) -> np.ndarray:
    """Flatten P (o, I, n_sec, n_od**2) into A with rows (tau, e) and columns (t, ij)."""
    o, I, n_sec, nn = P.shape
    return P.transpose(0, 2, 1, 3).reshape(o * n_sec, I * nn)


def aggregate_intervals(P: np.ndarray, E: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum every k consecutive observation rows of P and E (one row per estimation interval)."""
    o = E.shape[0]
    if o % k:
        raise ModelError("observation count is not a multiple of k")
    Pa = P.reshape(o // k, k, *P.shape[1:]).sum(axis=1)
    Ea = E.reshape(o // k, k, E.shape[1]).sum(axis=1)
    return Pa, Ea


def eval_numeric(x: np.ndarray, P: np.ndarray, E: np.ndarray) -> float:
    A = assignment_matrix(P)
    x = np.asarray(x, dtype=float).ravel()
    if A.shape[1] != x.size or A.shape[0] != E.size:
        raise ModelError(f"shape mismatch: A {A.shape}, x {x.size}, E {E.shape}")
    r = A @ x - np.asarray(E, dtype=float).ravel()
    return 0.5 * float(r @ r)


def _split(x: np.ndarray, I: int, n_od: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(I, n_od, n_od)


def eval_structure(x, d_p, d_a, I: int, n_od: int, eps: float = EPS) -> float:
    p, a = production_attraction(_split(x, I, n_od))
    if not (p.sum() > 0 and a.sum() > 0):
        raise ModelError("degenerate iterate")
    return metrics.kl(p / p.sum(), d_p, eps) + metrics.kl(a / a.sum(), d_a, eps)


def _kl_flow_grad(flows: np.ndarray, target: np.ndarray, eps: float) -> np.ndarray:
    # d/d(flows) of KL(flows / sum || target)
    total = flows.sum()
    d = flows / total
    g = np.log((d + eps) / (target + eps)) + d / (d + eps)
    return (g - d @ g) / total


def structure_gradient(x, d_p, d_a, I: int, n_od: int, eps: float = EPS) -> np.ndarray:
    p, a = production_attraction(_split(x, I, n_od))
    if not (p.sum() > 0 and a.sum() > 0):
        raise ModelError("degenerate iterate")
    gp = _kl_flow_grad(p, np.asarray(d_p, dtype=float), eps).reshape(I, n_od)
    ga = _kl_flow_grad(a, np.asarray(d_a, dtype=float), eps).reshape(I, n_od)
    return (gp[:, :, None] + ga[:, None, :]).ravel()


@dataclass
class Objective:
    """Frozen-assignment objective for one outer iteration."""

    alpha: float
    E: np.ndarray
    P: np.ndarray
    d_p: Optional[np.ndarray] = None
    d_a: Optional[np.ndarray] = None
    numeric_weight: Optional[float] = None
    eps: float = EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ModelError("alpha must lie in [0, 1]")
        self.E = np.asarray(self.E, dtype=float)
        self.A = assignment_matrix(self.P)
        self.b = self.E.ravel()
        _, self.I, _, nn = self.P.shape
        self.n_od = int(round(np.sqrt(nn)))
        if self.numeric_weight is None:
            self.numeric_weight = 1.0 / max(0.5 * float(self.b @ self.b), EPS)
        if self.alpha < 1.0 and (self.d_p is None or self.d_a is None):
            raise ModelError("structure term needs target distributions")

    @property
    def uses_structure(self) -> bool:
        return self.alpha < 1.0

    def numeric(self, x) -> float:
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def structure(self, x) -> float:
        if self.d_p is None:
            return float("nan")
        return eval_structure(x, self.d_p, self.d_a, self.I, self.n_od, self.eps)

    def value(self, x) -> float:
        v = self.alpha * self.numeric_weight * self.numeric(x)
        if self.uses_structure:
            v += (1.0 - self.alpha) * self.structure(x)
        return v

    def numeric_gradient(self, x) -> np.ndarray:
        return self.A.T @ (self.A @ x - self.b)

    def gradient(self, x) -> np.ndarray:
        g = self.alpha * self.numeric_weight * self.numeric_gradient(x)
        if self.uses_structure:
            g = g + (1.0 - self.alpha) * structure_gradient(x, self.d_p, self.d_a, self.I, self.n_od, self.eps)
        return g


def gradient(x, objective: Objective) -> np.ndarray:
    return objective.gradient(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# gradient projection


def project_direction(x, grad, fixed=None, kappa: float = 1e-8, tol: float = 0.0) -> tuple[np.ndarray, bool]:
    """Search direction under x >= 0, and whether x is a KKT point.

    With only non-negativity constraints the projector onto the face of the
    active set just zeroes the active coordinates.  ``fixed`` marks coordinates
    that are not decision variables (intra-node cells); they never move and are
    left out of the multiplier test.
    """
    x = np.asarray(x, dtype=float)
    grad = np.asarray(grad, dtype=float)
    active = x == 0
    if fixed is not None:
        active = active | fixed
    d = np.where(active, 0.0, -grad)
    test = active if fixed is None else active & ~fixed
    kkt = bool(np.linalg.norm(d) <= tol and np.all(grad[test] >= -kappa))
    return d, kkt


def max_step(d, cap: float = 1e3) -> float:
    d = np.asarray(d, dtype=float)
    neg = d < 0
    if not neg.any():
        return cap
    return float(np.min(-1.0 / d[neg]))


def update(x, lam: float, d) -> np.ndarray:
    """Multiplicative step x * (1 + lam * d); the coordinate that sets the step bound lands on 0 exactly."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    factor = 1.0 + lam * d
    with np.errstate(divide="ignore"):
        binding = (d < 0) & (lam >= (-1.0 / d) * (1.0 - 1e-12))
    factor[binding] = 0.0
    new = x * factor
    if np.any(new < 0):
        raise InvariantError("negative entry after multiplicative update")
    return new


def line_search(x, d, lam_max: float, f, f0: Optional[float] = None, n_eval: int = 32) -> float:
    """Golden-section search of f(x * (1 + lam * d)) over [0, lam_max].

    Uses ``n_eval`` evaluations in total, one of them at lam_max itself.
    Returns 0 when no evaluated step improves on f(x).
    """
    x = np.asarray(x, dtype=float)
    if f0 is None:
        f0 = f(x)

    def phi(lam):
        return f(update(x, lam, d))

    best_lam, best_f = 0.0, f0
    f_end = phi(lam_max)
    if f_end < best_f:
        best_lam, best_f = lam_max, f_end
    a, b = 0.0, lam_max
    c, e = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fe = phi(c), phi(e)
    for _ in range(n_eval - 3):
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - GOLDEN * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, e, fe
            e = a + GOLDEN * (b - a)
            fe = phi(e)
    for lam, val in ((c, fc), (e, fe)):
        if val < best_f:
            best_lam, best_f = lam, val
    return best_lam


@dataclass
class SolverState:
    x: np.ndarray
    iteration: int = 0
    values: list = field(default_factory=list)
    direction: Optional[np.ndarray] = None
    step: float = 0.0
    kkt: bool = False

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.x == 0)


def gradient_projection(x0, objective: Objective, n_iter: int, fixed=None, lam_cap: float = 1e3,
                        kappa: float = 1e-8, gtol: float = 0.0) -> SolverState:
    """Run up to ``n_iter`` multiplicative gradient-projection steps on a frozen objective."""
    state = SolverState(np.asarray(x0, dtype=float).copy())
    f = objective.value
    fx = f(state.x)
    state.values.append(fx)
    for _ in range(n_iter):
        g = objective.gradient(state.x)
        d, kkt = project_direction(state.x, g, fixed, kappa, gtol)
        state.direction = d
        if kkt:
            state.kkt = True
            break
        if not np.any(d):
            break
        lam = line_search(state.x, d, max_step(d, lam_cap), f, fx)
        state.step = lam
        if lam == 0.0:
            break
        state.x = update(state.x, lam, d)
        fx = f(state.x)
        state.values.append(fx)
        state.iteration += 1
    return state


# ---------------------------------------------------------------------------
# bi-level loop


MODES = ("traditional-estimation-interval", "traditional-observation-interval", "guided-inferred", "guided-true")


@dataclass
class EstimatorConfig:
    alpha: float = 0.5
    n_inner: int = 10
    n_outer: int = 40
    aggregate: bool = False
    lam_cap: float = 1e3
    kappa: float = 1e-8
    s_tol: float = 1e-3
    r_tol: float = 1e-4
    window: int = 3
    init_tol: float = 0.05
    numeric_scale: float = 1.0  # N is weighted by numeric_scale / (0.5 * ||E||^2)

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "EstimatorConfig":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        base = {"aggregate": mode == "traditional-estimation-interval"}
        if mode.startswith("traditional"):
            base["alpha"] = 1.0
        base.update(overrides)
        return cls(**base)


def _converged(history: list[float], tol: float, window: int) -> bool:
    if len(history) < window + 1:
        return False
    tail = history[-(window + 1):]
    return all(abs(b - a) <= tol * max(abs(a), EPS) for a, b in zip(tail[:-1], tail[1:]))


def initial_sequence(network: Network, E_obs: np.ndarray, grid: TimeGrid, tol: float = 0.05) -> np.ndarray:
    """Uniform off-diagonal demand scaled so simulated total counts match the observed total."""
    n = network.n_od
    shape = np.ones((grid.I, n, n))
    for t in range(grid.I):
        np.fill_diagonal(shape[t], 0.0)
    target = float(np.sum(E_obs))
    if target <= 0:
        raise ModelError("empty observation")

    def total(c):
        return float(simulate(network, c * shape, grid)[0].sum())

    c0 = 1.0
    s0 = total(c0)
    c1 = c0 * target / s0
    s1 = total(c1)
    if abs(s1 / target - 1.0) > tol and s1 != s0:
        c2 = c1 + (target - s1) * (c1 - c0) / (s1 - s0)
        if c2 > 0:
            c1 = c2
    return c1 * shape


@dataclass
class EstimateResult:
    estimate: np.ndarray
    trace: list[dict]
    inner_values: list[list[float]]


def bilevel_estimate(network: Network, E_obs: np.ndarray, grid: TimeGrid, d_p=None, d_a=None,
                     config: Optional[EstimatorConfig] = None, truth: Optional[np.ndarray] = None,
                     init: Optional[np.ndarray] = None) -> EstimateResult:
    config = config or EstimatorConfig()
    E_obs = np.asarray(E_obs, dtype=float)
    if E_obs.shape != (grid.o, network.n_sec):
        raise ModelError(f"observed counts have shape {E_obs.shape}, expected {(grid.o, network.n_sec)}")
    guided = d_p is not None and d_a is not None
    alpha = config.alpha if guided else 1.0
    n = network.n_od
    fixed = np.zeros((grid.I, n, n), dtype=bool)
    for t in range(grid.I):
        np.fill_diagonal(fixed[t], True)
    fixed = fixed.ravel()

    seq = initial_sequence(network, E_obs, grid, config.init_tol) if init is None else np.asarray(init, float)
    x = seq.ravel().copy()
    E_target = E_obs
    if config.aggregate:
        E_target = aggregate_intervals(np.zeros((grid.o, 1, 1, 1)), E_obs, grid.k)[1]
    weight = config.numeric_scale / max(0.5 * float(np.sum(E_target ** 2)), EPS)

    trace, inner_values = [], []
    r_hist, s_hist = [], []
    for outer in range(config.n_outer + 1):
        _, tlog = simulate(network, x.reshape(grid.I, n, n), grid)
        P = back_calculate(x.reshape(grid.I, n, n), tlog)
        if config.aggregate:
            P, _ = aggregate_intervals(P, E_obs, grid.k)
        obj = Objective(alpha, E_target, P, d_p if guided else None, d_a if guided else None, weight)
        R, N = obj.value(x), obj.numeric(x)
        S = obj.structure(x) if guided else float("nan")
        row = {"iteration": outer, "R": R, "N": N, "S": S, "alpha": alpha}
        if truth is not None:
            s = metrics.summary(x.reshape(grid.I, n, n), truth)
            row.update({f"rmsn_{t}": v for t, v in enumerate(s["rmsn"])})
            row.update({f"rho_{t}": v for t, v in enumerate(s["rho"])})
            row["rmsn_avg"], row["rho_avg"] = s["rmsn_avg"], s["rho_avg"]
        trace.append(row)
        log.debug("outer %d R=%.6g N=%.6g S=%.6g alpha=%.2f", outer, R, N, S, alpha)
        r_hist.append(R)
        r_done = _converged(r_hist, config.r_tol, config.window)
        if guided and alpha < 1.0:
            s_hist.append(S)
            # R settling while the structure term is active ends the structure phase too
            if r_done or _converged(s_hist, config.s_tol, config.window):
                alpha = 1.0
                obj = Objective(alpha, E_target, P, None, None, weight)
                r_hist, r_done = [obj.value(x)], False
        if outer == config.n_outer or r_done:
            break
        state = gradient_projection(x, obj, config.n_inner, fixed, config.lam_cap, config.kappa)
        inner_values.append(state.values)
        x = state.x
    return EstimateResult(x.reshape(grid.I, n, n), trace, inner_values)


def save_trace(trace: list[dict], path) -> None:
    keys = list(trace[0].keys()) if trace else []
    for row in trace:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in trace:
            w.writerow([repr(float(row[k])) if k in row else "" for k in keys])
