"""Anderson acceleration with an incrementally updated QR factorization.

The constrained least-squares problem

    min_beta ||F beta||_2  subject to  sum(beta) = 1,  F = [f_{t-p}, ..., f_t]

is solved in its unconstrained difference form

    min_gamma ||f_t - dF gamma||_2,  dF = [f_{i+1} - f_i]

with dF = Q R kept up to date one modified Gram-Schmidt sweep at a time. The
table is cleared (a restart) instead of dropping old columns, so Q and R are
only ever extended.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError
from .sampler import SampleConfig, ddim_step, initial_noise, timestep_sequence

log = logging.getLogger(__name__)

DROP_TOL = 1e-10
GAMMA_BOUND = 1e3


class RestartSignal(Exception):
    """The difference table became (numerically) rank deficient."""


def beta_from_gamma(gamma) -> np.ndarray:
    """Combination weights from difference coefficients; the weights sum to 1."""
    gamma = np.asarray(gamma, dtype=np.float64)
    p = len(gamma)
    beta = np.empty(p + 1)
    if p == 0:
        beta[0] = 1.0
        return beta
    beta[0] = gamma[0]
    beta[1:p] = gamma[1:] - gamma[:-1]
    beta[p] = 1.0 - gamma[-1]
    return beta


def gamma_from_beta(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    return np.cumsum(beta[:-1])


class AndersonState:
    """Difference table for one chain: dF = Q R and the matching dG columns."""

    def __init__(self, n: int, k: int, drop_tol: float = DROP_TOL, gamma_bound: float = GAMMA_BOUND):
        if k < 0:
            raise ContractError("table size k must be >= 0")
        self.n, self.k = n, k
        self.drop_tol = drop_tol
        self.gamma_bound = gamma_bound
        self.Q = np.zeros((n, k))
        self.R = np.zeros((k, k))
        self.dF = np.zeros((n, k))
        self.dG = np.zeros((n, k))
        self.p = 0
        self.first_norm = 0.0
        self.f_prev: np.ndarray | None = None
        self.g_prev: np.ndarray | None = None
        self.restarts = 0
        self.last_beta: np.ndarray | None = None

    def clear(self):
        self.p = 0
        self.first_norm = 0.0
        self.restarts += 1

    def factors(self):
        return self.Q[:, :self.p], self.R[:self.p, :self.p]


def qr_append(state: AndersonState, df) -> None:
    """Append a column to dF = Q R with one modified Gram-Schmidt sweep.

    Raises RestartSignal, leaving the state untouched, when the orthogonalized
    column is below the drop tolerance.
    """
    p = state.p
    if p >= state.k:
        raise ContractError(f"table full (p={p}, k={state.k})")
    df = np.asarray(df, dtype=np.float64)
    v = df.copy()
    r = np.zeros(p + 1)
    for i in range(p):
        q = state.Q[:, i]
        r[i] = q @ v
        v -= r[i] * q
    norm = float(np.linalg.norm(v))
    ref = state.first_norm if p > 0 else norm
    if not np.isfinite(norm) or norm == 0.0 or norm < state.drop_tol * ref:
        raise RestartSignal(f"column {p} dependent (residual norm {norm:.3g})")
    r[p] = norm
    state.Q[:, p] = v / norm
    state.R[:p + 1, p] = r
    state.dF[:, p] = df
    if p == 0:
        state.first_norm = norm
    state.p = p + 1


def back_substitute(R: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    p = len(rhs)
    x = np.zeros(p)
    for i in range(p - 1, -1, -1):
        x[i] = (rhs[i] - R[i, i + 1:p] @ x[i + 1:p]) / R[i, i]
    return x


def solve_gamma(state: AndersonState, f_t) -> np.ndarray:
    """Least-squares coefficients gamma = R^{-1} Q^T f_t."""
    p = state.p
    if p < 1:
        raise ContractError("solve_gamma needs at least one column")
    Q, R = state.factors()
    diag = np.abs(np.diag(R))
    if np.any(diag < state.drop_tol * max(state.first_norm, 1e-300)):
        raise RestartSignal("tiny diagonal in R")
    return back_substitute(R, Q.T @ np.asarray(f_t, dtype=np.float64))


def aa_prototype_weights(F) -> np.ndarray:
    """Weights beta with sum(beta) = 1 minimizing ||F beta||.

    Columns of the difference table that are dependent on earlier ones get a
    zero coefficient, which resolves ties in the degenerate case.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    p = F.shape[1] - 1
    if p == 0:
        return np.ones(1)
    state = AndersonState(F.shape[0], p)
    kept = []
    for i in range(p):
        try:
            qr_append(state, F[:, i + 1] - F[:, i])
            kept.append(i)
        except RestartSignal:
            continue
    gamma = np.zeros(p)
    if kept:
        gamma[kept] = solve_gamma(state, F[:, p])
    return beta_from_gamma(gamma)


def aa_update(state: AndersonState, g_wt, w_t) -> np.ndarray:
    """Next iterate g(w_t) - dG gamma.

    With k = 0, or right after a restart, this is the plain step g(w_t).
    """
    g = np.asarray(g_wt, dtype=np.float64)
    if state.k == 0:
        return g
    f = g - w_t
    if state.f_prev is not None:
        df, dg = f - state.f_prev, g - state.g_prev
        if state.p == state.k:
            state.clear()
        else:
            try:
                qr_append(state, df)
                state.dG[:, state.p - 1] = dg
            except RestartSignal:
                state.clear()
        state.f_prev, state.g_prev = f, g
        if state.p == 0:
            return g
    else:
        state.f_prev, state.g_prev = f, g
        return g
    try:
        gamma = solve_gamma(state, f)
    except RestartSignal:
        state.clear()
        return g
    if np.sum(np.abs(gamma)) > state.gamma_bound:
        state.clear()
        return g
    state.last_beta = beta_from_gamma(gamma)
    return g - state.dG[:, :state.p] @ gamma


def fixed_point_iterate(g, w0, k: int, iters: int, **kwargs):
    """Accelerated iteration of a generic map; returns iterates and residual norms."""
    w = np.asarray(w0, dtype=np.float64)
    state = AndersonState(w.size, k, **kwargs)
    ws, res = [w.copy()], []
    for _ in range(iters):
        gw = np.asarray(g(w), dtype=np.float64)
        res.append(float(np.linalg.norm(gw - w)))
        w = aa_update(state, gw, w)
        ws.append(w.copy())
    return np.array(ws), np.array(res), state


@dataclass
class AAReport:
    """Per-iteration fixed-point residuals ||g(w_i) - w_i|| for each chain."""

    residuals: np.ndarray  # (iterations, chains)
    elapsed_ns: np.ndarray  # cumulative, per iteration
    k: int
    restarts: list[int] = field(default_factory=list)
    fallbacks: int = 0

    @property
    def wall_time(self) -> float:
        return float(self.elapsed_ns[-1]) * 1e-9 if len(self.elapsed_ns) else 0.0

    def iterations_to(self, tol: float = 1e-3) -> np.ndarray:
        """First iteration index with residual < tol; chains that never get
        there are counted as the full run length."""
        below = self.residuals < tol
        hit = below.any(axis=0)
        first = np.argmax(below, axis=0)
        return np.where(hit, first, self.residuals.shape[0])

    def converged(self, tol: float = 1e-3) -> np.ndarray:
        return (self.residuals < tol).any(axis=0)


def accelerated_sample(model, sched, cfg: SampleConfig, k: int, n: int, eps_fn=None,
                       record_states: bool = False):
    """DDIM reverse process with every step passed through Anderson acceleration.

    The fixed-point map at iteration i is the DDIM step from the current
    timestep to the next one. Histories run across timesteps and the table is
    cleared whenever it would hold more than k differences. `eps_fn(x, t)`
    replaces the model's noise prediction (used for guidance).

    Returns (samples, AAReport, states or None).
    """
    dim = model.feature_dim
    x, _ = initial_noise(cfg.seed, n, dim)
    seq = timestep_sequence(sched.T, cfg.T_use)
    states = [AndersonState(dim, k) for _ in range(n)]
    residuals, elapsed = [], []
    fallbacks = 0
    visited = [x.copy()] if record_states else None
    start = time.perf_counter_ns()
    for i in range(len(seq) - 1, -1, -1):
        t = int(seq[i])
        s = int(seq[i - 1]) if i > 0 else 0
        eps = None if eps_fn is None else eps_fn(x, t)
        g = ddim_step(model, sched, x, t, s, eps=eps, literal=cfg.literal)
        residuals.append(np.linalg.norm(g - x, axis=1))
        if k == 0:
            x = g
        else:
            nxt = np.empty_like(x)
            for j, st in enumerate(states):
                w = aa_update(st, g[j], x[j])
                if not np.all(np.isfinite(w)):
                    log.warning("non-finite extrapolation at t=%d chain %d, taking plain step", t, j)
                    fallbacks += 1
                    st.clear()
                    w = g[j]
                nxt[j] = w
            x = nxt
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state after step t={t}", step=t)
        elapsed.append(time.perf_counter_ns() - start)
        if record_states:
            visited.append(x.copy())
    report = AAReport(np.array(residuals), np.array(elapsed), k,
                      restarts=[st.restarts for st in states], fallbacks=fallbacks)
    return x, report, (np.array(visited) if record_states else None)
