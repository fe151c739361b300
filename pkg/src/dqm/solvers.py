"""
DQM, DLM and DADMM iterations.

The production path is the reduced form that each node can run with one
neighbor exchange per half step::

    x_{i,k+1}   = K_i^{-1} [ c d_i x_{i,k} + c sum_j x_{j,k} + ... - phi_{i,k} ]
    phi_{i,k+1} = phi_{i,k} + c sum_j (x_{i,k+1} - x_{j,k+1})

The full-variable form with explicit ``z``, ``alpha`` and ``beta`` is kept
only as a dense reference implementation for tests and audits.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .graph import incidence_operators
from .objective import aggregate_eval, aggregate_gradient, aggregate_hessian

__all__ = [
    "METHODS",
    "SolverError",
    "SingularProblemError",
    "ReducedState",
    "FullState",
    "SolverConfig",
    "IterationTrace",
    "TRACE_COLUMNS",
    "dqm_step",
    "dlm_step",
    "dadmm_step",
    "reduced_step",
    "full_form_step",
    "initial_full_state",
    "centralized_solve",
    "run",
    "run_full_form",
]

log = logging.getLogger(__name__)

METHODS = ("DQM", "DLM", "DADMM")

TRACE_COLUMNS = (
    "k",
    "rel_err",
    "V",
    "err_bound_lhs",
    "err_bound_rhs",
    "delta_k",
    "wall_ns",
)

_ARMIJO_SLOPE = 1e-4
_ARMIJO_MAX_HALVINGS = 40


def _armijo(fun, x, step, base, slope):
    """
    Backtracking step length (factor 1/2, sufficient-decrease slope 1e-4).

    Once the predicted decrease is below the roundoff level of ``fun`` the
    value test is meaningless and the full Newton step is taken.
    """
    if -slope <= 1e3 * np.finfo(float).eps * max(1.0, abs(base)):
        return 1.0
    t = 1.0
    for _ in range(_ARMIJO_MAX_HALVINGS):
        if fun(x + t * step) <= base + _ARMIJO_SLOPE * t * slope:
            return t
        t *= 0.5
    return 1.0


class SolverError(RuntimeError):
    """A step could not be completed; carries the node and iteration."""

    def __init__(self, message, node=None, iteration=None, residual=None):
        super().__init__(message)
        self.node = node
        self.iteration = iteration
        self.residual = residual

    def at_iteration(self, k):
        err = SolverError(f"iteration {k}: {self}", self.node, k, self.residual)
        err.__cause__ = self
        return err


class SingularProblemError(SolverError):
    """The centralized problem has no unique minimizer."""


def _check_method(method):
    name = str(method).upper()
    if name not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return name


@dataclass(frozen=True)
class ReducedState:
    """Iterate of the reduced recursion: ``x`` and ``phi = E_o^T alpha``."""

    x: np.ndarray
    phi: np.ndarray
    k: int = 0

    @classmethod
    def initial(cls, problem, x0=None):
        n, p = problem.n, problem.p
        x = np.zeros((n, p)) if x0 is None else problem.as_blocks(x0).copy()
        return cls(x, np.zeros((n, p)), 0)


@dataclass(frozen=True)
class FullState:
    """Iterate of the textbook recursion on flat vectors."""

    x: np.ndarray  # (n*p,)
    z: np.ndarray  # (m*p,)
    alpha: np.ndarray  # (m*p,)
    beta: np.ndarray  # (m*p,)
    k: int = 0


def initial_full_state(problem, ops=None, x0=None):
    """All-zero multipliers and ``z_0 = E_u x_0 / 2``."""
    ops = ops or incidence_operators(problem.network)
    x = np.zeros(problem.n * problem.p) if x0 is None else np.asarray(x0, float).ravel().copy()
    mp = ops.m * ops.p
    return FullState(x, 0.5 * (ops.E_u @ x), np.zeros(mp), np.zeros(mp), 0)


@dataclass(frozen=True)
class SolverConfig:
    method: str
    c: float
    rho: float | None = None
    max_iter: int = 300
    inner_tol: float = 1e-12
    inner_max: int = 50
    record_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", _check_method(self.method))
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.method == "DLM" and not (self.rho is not None and self.rho > 0):
            raise ValueError("DLM requires rho > 0")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


def _neighbor_sum(net, X):
    return net.adjacency @ X


def _phi_update(net, phi, x_new, c):
    deg = net.degrees[:, None]
    return phi + c * (deg * x_new - _neighbor_sum(net, x_new))


def dqm_step(state, problem, ops, c):
    """One synchronous DQM round; each node solves a ``p x p`` SPD system."""
    net = ops.network
    X, Phi = state.x, state.phi
    deg = net.degrees
    _, G, H = aggregate_eval(problem, X)
    rhs = (
        c * deg[:, None] * X
        + c * _neighbor_sum(net, X)
        + np.einsum("ipq,iq->ip", H, X)
        - G
        - Phi
    )
    X_new = np.empty_like(X)
    eye = np.eye(problem.p)
    for i in range(net.n):
        K = 2.0 * c * deg[i] * eye + H[i]
        try:
            fac = scipy.linalg.cho_factor(K, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(
                f"local DQM system at node {i} is not positive definite", node=i
            ) from exc
        X_new[i] = scipy.linalg.cho_solve(fac, rhs[i])
    return ReducedState(X_new, _phi_update(net, Phi, X_new, c), state.k + 1)


def dlm_step(state, problem, ops, c, rho):
    """One DLM round: the DQM system with every local Hessian replaced by ``rho I``."""
    net = ops.network
    X, Phi = state.x, state.phi
    deg = net.degrees[:, None]
    G = aggregate_gradient(problem, X)
    rhs = c * deg * X + c * _neighbor_sum(net, X) + rho * X - G - Phi
    X_new = rhs / (2.0 * c * deg + rho)
    return ReducedState(X_new, _phi_update(net, Phi, X_new, c), state.k + 1)


def _local_newton(f, x_start, shift, rhs, tol, max_iter, node=None):
    """
    Minimize ``f(x) + (shift/2)||x||^2 - rhs^T x`` by damped Newton.

    Stops once the gradient norm is at most ``tol``.
    """
    x = np.array(x_start, dtype=float)
    eye = np.eye(x.size)

    def psi(y):
        return f.value(y) + 0.5 * shift * float(y @ y) - float(rhs @ y)

    for _ in range(max_iter + 1):
        g = f.gradient(x) + shift * x - rhs
        res = float(np.linalg.norm(g))
        if res <= tol:
            return x
        K = f.hessian(x) + shift * eye
        step = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(K, lower=True), g)
        x = x + _armijo(psi, x, step, psi(x), float(g @ step)) * step
    raise SolverError(
        f"inner Newton at node {node} did not reach {tol:g} in {max_iter} iterations "
        f"(residual {res:.3e})",
        node=node,
        residual=res,
    )


def dadmm_step(state, problem, ops, c, inner_tol=1e-12, inner_max=50):
    """One DADMM round; each node minimizes its augmented local objective exactly."""
    net = ops.network
    X, Phi = state.x, state.phi
    deg = net.degrees
    target = c * deg[:, None] * X + c * _neighbor_sum(net, X) - Phi
    X_new = np.empty_like(X)
    for i, f in enumerate(problem.locals):
        X_new[i] = _local_newton(
            f, X[i], 2.0 * c * deg[i], target[i], inner_tol, inner_max, node=i
        )
    return ReducedState(X_new, _phi_update(net, Phi, X_new, c), state.k + 1)


def reduced_step(config, state, problem, ops):
    if config.method == "DQM":
        return dqm_step(state, problem, ops, config.c)
    if config.method == "DLM":
        return dlm_step(state, problem, ops, config.c, config.rho)
    return dadmm_step(state, problem, ops, config.c, config.inner_tol, config.inner_max)


class _DenseMatrices:
    """Dense ``A``, ``B`` and friends for the reference recursion."""

    def __init__(self, ops):
        self.A_s = ops.A_s.toarray()
        self.A_d = ops.A_d.toarray()
        self.A = np.vstack([self.A_s, self.A_d])
        mp = self.A_s.shape[0]
        self.B = np.vstack([-np.eye(mp), -np.eye(mp)])
        self.AtA = self.A.T @ self.A
        self.BtB = self.B.T @ self.B
        self.mp = mp


def full_form_step(method, state, problem, matrices, c, rho=None, inner_tol=1e-12,
                   inner_max=50):
    """
    One step of the explicit ``(x, z, lambda)`` recursion.

    ``matrices`` is either an :class:`IncidenceOperators` or the cached dense
    bundle returned by a previous call on the same network. Dense algebra
    throughout; meant for small reference problems only.
    """
    method = _check_method(method)
    mats = matrices if isinstance(matrices, _DenseMatrices) else _DenseMatrices(matrices)
    A, B = mats.A, mats.B
    lam = np.concatenate([state.alpha, state.beta])
    xk, zk = state.x, state.z
    # constant part of grad_x L(x, z_k, lam_k) apart from f and cA^TA x
    lin = A.T @ lam + c * (A.T @ (B @ zk))

    if method == "DQM":
        G = aggregate_gradient(problem, xk).ravel()
        H = scipy.linalg.block_diag(*aggregate_hessian(problem, xk))
        x_new = np.linalg.solve(H + c * mats.AtA, H @ xk - G - lin)
    elif method == "DLM":
        G = aggregate_gradient(problem, xk).ravel()
        K = rho * np.eye(xk.size) + c * mats.AtA
        x_new = np.linalg.solve(K, rho * xk - G - lin)
    else:
        x_new = _dense_admm_primal(problem, mats, xk, lin, c, inner_tol, inner_max)

    # z-update from B^T lam_k + c B^T (A x_{k+1} + B z) = 0
    z_new = np.linalg.solve(mats.BtB, -(B.T @ lam) / c - B.T @ (A @ x_new))
    lam_new = lam + c * (A @ x_new + B @ z_new)
    mp = mats.mp
    return FullState(x_new, z_new, lam_new[:mp], lam_new[mp:], state.k + 1)


def _dense_admm_primal(problem, mats, x0, lin, c, tol, max_iter):
    """Newton on the whole stacked vector for the exact ADMM x-update."""
    x = x0.copy()

    def grad(y):
        return aggregate_gradient(problem, y).ravel() + lin + c * (mats.AtA @ y)

    def lag(y):
        return aggregate_eval(problem, y)[0] + float(lin @ y) + 0.5 * c * float(y @ mats.AtA @ y)

    for _ in range(max_iter + 1):
        g = grad(x)
        if np.linalg.norm(g) <= tol:
            return x
        K = scipy.linalg.block_diag(*aggregate_hessian(problem, x)) + c * mats.AtA
        step = -np.linalg.solve(K, g)
        x = x + _armijo(lag, x, step, lag(x), float(g @ step)) * step
    raise SolverError(f"dense ADMM x-update did not reach {tol:g}", residual=float(np.linalg.norm(g)))


def centralized_solve(problem, tol=1e-12, max_iter=100, x0=None):
    """
    Minimize ``sum_i f_i`` over a single ``p``-vector with damped Newton.

    Raises
    ------
    SingularProblemError
        If the Hessian becomes numerically singular (e.g. separable,
        unregularized logistic data); add a ridge term in that case.
    SolverError
        If ``max_iter`` iterations do not bring ``||grad||`` below ``tol``.
    """
    x = np.zeros(problem.p) if x0 is None else np.array(x0, dtype=float)
    for it in range(max_iter + 1):
        g = problem.global_gradient(x)
        gnorm = float(np.linalg.norm(g))
        H = problem.global_hessian(x)
        w = np.linalg.eigvalsh(H)
        if w[0] <= 1e-10 * max(1.0, w[-1]):
            raise SingularProblemError(
                f"Hessian of the global objective is singular at iteration {it} "
                f"(min eigenvalue {w[0]:.3e}); the data may be separable, use reg > 0"
            )
        if gnorm <= tol:
            return x
        step = -np.linalg.solve(H, g)
        fun = problem.global_value
        x = x + _armijo(fun, x, step, fun(x), float(g @ step)) * step
    raise SolverError(
        f"centralized Newton did not reach {tol:g} in {max_iter} iterations "
        f"(gradient norm {gnorm:.3e})",
        residual=gnorm,
    )


@dataclass
class IterationTrace:
    """
    Per-iteration record of one run.

    ``rows[k]`` holds the :data:`TRACE_COLUMNS` for iterate ``k``. Columns
    describing a step (error bound, contraction constant) live on the row of
    the iterate that step produced; row 0 leaves them empty.
    """

    method: str
    config: SolverConfig
    rows: list = field(default_factory=list)
    states: list | None = None

    def column(self, name):
        return np.array(
            [np.nan if r.get(name) is None else r[name] for r in self.rows], dtype=float
        )

    def iterations_to(self, threshold, column="rel_err"):
        """First ``k`` whose ``column`` value is at or below ``threshold``."""
        for r in self.rows:
            v = r.get(column)
            if v is not None and v <= threshold:
                return r["k"]
        return None

    @property
    def final(self):
        return self.states[-1] if self.states else None


def run(method, problem, config, hooks=(), x0=None, keep_states=False, ops=None):
    """
    Run ``config.max_iter`` synchronous rounds from ``x_0`` (default 0), ``phi_0 = 0``.

    Each hook is called as ``hook(prev, state)`` (``prev`` is ``None`` for
    the initial point) and returns a dict of trace columns to record.
    """
    method = _check_method(method)
    if config.method != method:
        config = replace(config, method=method)
    ops = ops or incidence_operators(problem.network)
    state = ReducedState.initial(problem, x0)
    trace = IterationTrace(method, config, [], [] if keep_states else None)
    start = time.perf_counter_ns()

    def record(prev, cur):
        row = dict.fromkeys(TRACE_COLUMNS)
        row["k"] = cur.k
        if config.record_time:
            row["wall_ns"] = time.perf_counter_ns() - start
        for hook in hooks:
            row.update(hook(prev, cur) or {})
        trace.rows.append(row)
        if keep_states:
            trace.states.append(cur)

    record(None, state)
    for k in range(config.max_iter):
        try:
            nxt = reduced_step(config, state, problem, ops)
        except SolverError as exc:
            raise exc.at_iteration(k) from exc
        record(state, nxt)
        state = nxt
    if not keep_states:
        trace.states = [state]
    log.debug("%s finished %d iterations", method, config.max_iter)
    return trace


def run_full_form(method, problem, config, x0=None, ops=None):
    """Reference run of the explicit recursion; returns the list of states."""
    method = _check_method(method)
    ops = ops or incidence_operators(problem.network)
    mats = _DenseMatrices(ops)
    state = initial_full_state(problem, ops, x0)
    states = [state]
    for _ in range(config.max_iter):
        state = full_form_step(
            method, state, problem, mats, config.c, config.rho, config.inner_tol,
            config.inner_max,
        )
        states.append(state)
    return states
