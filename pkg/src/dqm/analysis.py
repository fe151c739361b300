"""
Convergence bookkeeping for DQM/DLM/DADMM runs.

Given the reduced iterates ``(x_k, phi_k)`` the full-variable quantities are
recovered as ``z_k = E_u x_k / 2`` and ``alpha_k = E_o (2 L_o)^+ phi_k``.
From those this module evaluates the approximation error vectors and their
bounds, the energy ``V = c||z - z*||^2 + ||alpha - alpha*||^2 / c``, the
per-iteration contraction constants, and an audit of every checkable
identity and inequality along a trace.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import spectral_bounds
from .objective import aggregate_gradient, aggregate_hessian, curvature_estimates
from .solvers import centralized_solve

__all__ = [
    "KKT_TOL",
    "AlphaRecoveryError",
    "CertificateError",
    "RateAssumptionError",
    "OptimalCertificate",
    "RateParameters",
    "approx_error",
    "recover_alpha",
    "optimal_certificate",
    "energy",
    "zeta",
    "rate_constant",
    "dadmm_rate_limit",
    "CheckResult",
    "AuditReport",
    "audit",
    "trace_hook",
]

KKT_TOL = 1e-8
COLUMN_TOL = 1e-9
LEMMA3_TOL = 1e-8
PRIMAL_TOL = 1e-10
# V and ||x - x*||^2 cannot be resolved below (roundoff)^2 of the initial energy
_ENERGY_FLOOR = (1e3 * np.finfo(float).eps) ** 2
_BOUND_RTOL = 1e-10


class AlphaRecoveryError(ValueError):
    """``phi`` is not in the column space of ``E_o^T``."""


class CertificateError(RuntimeError):
    """Optimality conditions could not be met at the requested tolerance."""


class RateAssumptionError(ValueError):
    """A hypothesis of the linear-rate theorems does not hold."""


def _flat(a):
    return np.asarray(a, dtype=float).ravel()


def column_space_residual(v, E):
    """Distance from ``v`` to ``range(E)`` (dense least squares)."""
    E = E.toarray() if hasattr(E, "toarray") else np.asarray(E)
    coef, *_ = np.linalg.lstsq(E, v, rcond=None)
    return float(np.linalg.norm(v - E @ coef))


def recover_alpha(phi, ops, tol=COLUMN_TOL, check=True):
    """
    Unique ``alpha`` in ``range(E_o)`` with ``E_o^T alpha = phi``.

    Raises
    ------
    AlphaRecoveryError
        If ``check`` and the reconstruction residual exceeds ``tol``, i.e.
        ``phi`` has left ``range(E_o^T)`` (its blocks no longer sum to 0).
    """
    phi = _flat(phi)
    alpha = ops.E_o @ (ops.L_o_pinv @ phi)
    if check:
        res = float(np.linalg.norm(ops.E_o.T @ alpha - phi))
        if res > tol:
            raise AlphaRecoveryError(
                f"phi is not in the column space of E_o^T (residual {res:.3e})"
            )
    return alpha


@dataclass(frozen=True)
class OptimalCertificate:
    """Primal-dual optimum ``(x*, z*, alpha*)`` with ``alpha*`` in ``range(E_o)``."""

    x_tilde: np.ndarray
    x_star: np.ndarray  # (n, p)
    z_star: np.ndarray  # (m*p,)
    alpha_star: np.ndarray  # (m*p,)

    def residuals(self, problem, ops):
        x = _flat(self.x_star)
        grad = aggregate_gradient(problem, x).ravel()
        return {
            "kkt": float(np.linalg.norm(grad + ops.E_o.T @ self.alpha_star)),
            "consensus": float(np.linalg.norm(ops.E_o @ x)),
            "primal": float(np.linalg.norm(ops.E_u @ x - 2.0 * self.z_star)),
            "column_space": column_space_residual(self.alpha_star, ops.E_o),
        }


def optimal_certificate(problem, ops, tol=1e-12, x_tilde=None):
    """
    Build ``(x*, z*, alpha*)`` from the centralized minimizer.

    ``alpha* = -E_o (2 L_o)^+ grad f(x*)`` is the minimum-norm (hence
    ``range(E_o)``) solution of ``E_o^T alpha = -grad f(x*)``.
    """
    if x_tilde is None:
        x_tilde = centralized_solve(problem, tol=tol)
    x_tilde = np.asarray(x_tilde, dtype=float)
    x_star = np.tile(x_tilde, (problem.n, 1))
    z_star = 0.5 * (ops.E_u @ x_star.ravel())
    grad = aggregate_gradient(problem, x_star).ravel()
    alpha_star = -(ops.E_o @ (ops.L_o_pinv @ grad))
    cert = OptimalCertificate(x_tilde, x_star, z_star, alpha_star)
    res = cert.residuals(problem, ops)
    limits = {"kkt": KKT_TOL, "consensus": PRIMAL_TOL, "primal": PRIMAL_TOL,
              "column_space": COLUMN_TOL}
    bad = {k: v for k, v in res.items() if v > limits[k]}
    if bad:
        raise CertificateError(f"optimality residuals too large: {bad}")
    return cert


def energy(z, alpha, cert, c):
    """``c ||z - z*||^2 + ||alpha - alpha*||^2 / c``."""
    dz = _flat(z) - cert.z_star
    da = _flat(alpha) - cert.alpha_star
    return float(c * (dz @ dz) + (da @ da) / c)


def _remainder(problem, x, dx):
    X = problem.as_blocks(x)
    DX = problem.as_blocks(dx)
    return np.stack([f.taylor_remainder(X[i], DX[i]) for i, f in enumerate(problem.locals)])


def approx_error(method, problem, x_k, x_next, rho=None, curvature=None):
    """
    Gradient-approximation error of one step and its a priori bound.

    DQM: ``e = grad f(x_k) + H(x_k) dx - grad f(x_{k+1})`` bounded by
    ``min(2M||dx||, L/2 ||dx||^2)``. DLM: ``e = grad f(x_k) + rho dx -
    grad f(x_{k+1})`` bounded by ``(rho + M)||dx||``. DADMM has no
    approximation: ``e = 0``.

    ``e`` is assembled from each local objective's Taylor remainder so it
    stays accurate when ``||dx||`` is near machine precision.

    Returns
    -------
    e : ndarray, shape (n, p)
    bound : float
    """
    method = method.upper()
    curvature = curvature or curvature_estimates(problem)
    x_k = problem.as_blocks(x_k)
    dx = problem.as_blocks(x_next) - x_k
    step = float(np.linalg.norm(dx))
    if method == "DADMM":
        return np.zeros_like(x_k), 0.0
    R = _remainder(problem, x_k, dx)
    if method == "DQM":
        bound = min(2.0 * curvature.M * step, 0.5 * curvature.L * step**2)
        return -R, bound
    if method == "DLM":
        if rho is None:
            raise ValueError("DLM error needs rho")
        H = aggregate_hessian(problem, x_k)
        e = rho * dx - np.einsum("ipq,iq->ip", H, dx) - R
        return e, (rho + curvature.M) * step
    raise ValueError(f"unknown method {method!r}")


def zeta(curvature, step_norm):
    """DQM error coefficient ``min(L/2 ||x_{k+1} - x_k||, 2M)``."""
    return min(0.5 * curvature.L * step_norm, 2.0 * curvature.M)


@dataclass(frozen=True)
class RateParameters:
    """
    Constants entering the contraction factor ``1 / (1 + delta_k)``.

    ``mu_prime=None`` selects, per step, the ``mu' > 1`` that maximizes the
    first branch of ``delta_k`` in closed form; it tends to the DADMM limit
    as the error coefficient vanishes. ``eta=None`` selects the geometric
    mean of the admissible interval.
    """

    c: float
    curvature: object
    spectral: object
    mu: float = 1.01
    mu_prime: float | None = 1.01
    eta: float | None = None

    @classmethod
    def for_problem(cls, problem, ops, c, **kw):
        return cls(c, curvature_estimates(problem), spectral_bounds(ops), **kw)

    def c_threshold(self, method, rho=None):
        m, M = self.curvature.m, self.curvature.M
        gu = self.spectral.gamma_u
        beta_max = 2.0 * M if method == "DQM" else rho + M
        if m <= 0 or gu <= 0:
            return math.inf
        return beta_max**2 / (m * gu**2)

    def violations(self, method, rho=None):
        """Names of violated hypotheses; empty when the theorem applies."""
        out = []
        if self.curvature.m <= 0:
            out.append("m > 0 (strong convexity)")
        if self.spectral.gamma_u <= 0:
            out.append("gamma_u > 0 (non-bipartite network)")
        if self.spectral.gamma_o <= 0:
            out.append("gamma_o > 0 (connected network)")
        if not self.mu > 1:
            out.append("mu > 1")
        if self.mu_prime is not None and not self.mu_prime > 1:
            out.append("mu' > 1")
        if method == "DLM" and not (rho is not None and rho > 0):
            out.append("rho > 0")
        if not out and method != "DADMM" and not self.c > self.c_threshold(method, rho):
            lhs = "4M^2" if method == "DQM" else "(rho+M)^2"
            out.append(
                f"c > {lhs}/(m gamma_u^2) = {self.c_threshold(method, rho):.6g} (c = {self.c:g})"
            )
        return out


def _general_delta(params, beta):
    c = params.c
    m, M = params.curvature.m, params.curvature.M
    gu, Gu, go = params.spectral.gamma_u, params.spectral.Gamma_u, params.spectral.gamma_o
    mu = params.mu
    if beta > 0:
        # geometric mean of (beta/m, c gamma_u^2/beta); beta cancels
        eta = math.sqrt(c * gu**2 / m) if params.eta is None else params.eta
        if not beta / m < eta < c * gu**2 / beta:
            raise RateAssumptionError(
                f"eta = {eta:g} outside ({beta / m:g}, {c * gu**2 / beta:g})"
            )
        eta_beta, beta_over_eta = eta * beta, beta / eta
    else:
        eta_beta = beta_over_eta = 0.0
    a = c * Gu**2 * gu**2
    b = 4.0 * beta**2 / c
    if params.mu_prime is None:
        denom1 = mu * (math.sqrt(a) + math.sqrt(b)) ** 2
    else:
        mp = params.mu_prime
        denom1 = mu * mp * (a + b / (mp - 1.0))
    first = (mu - 1.0) * (c * gu**2 - eta_beta) * go**2 / denom1
    second = (m - beta_over_eta) / (c * Gu**2 / 4.0 + mu * M**2 / (c * go**2))
    return min(first, second)


def rate_constant(method, params, zeta_or_rho):
    """
    Contraction constant ``delta_k`` for one step.

    For DQM pass ``zeta_k`` (see :func:`zeta`); for DLM pass ``rho``. DADMM
    has no approximation error and no ``c`` threshold; its constant is
    :func:`dadmm_rate_limit` and ``zeta_or_rho`` is ignored.

    Raises
    ------
    RateAssumptionError
        Naming the violated hypothesis (``c`` threshold, ``m > 0``, ...).
    """
    method = method.upper()
    if method == "DQM":
        rho = None
        beta = float(zeta_or_rho)
        if beta > 2.0 * params.curvature.M * (1 + 1e-12):
            raise RateAssumptionError(f"zeta = {beta:g} exceeds 2M")
    elif method == "DLM":
        rho = float(zeta_or_rho)
        beta = rho + params.curvature.M
    elif method == "DADMM":
        rho, beta = None, 0.0
    else:
        raise ValueError(f"unknown method {method!r}")
    bad = params.violations(method, rho)
    if bad:
        raise RateAssumptionError("; ".join(bad))
    delta = dadmm_rate_limit(params) if method == "DADMM" else _general_delta(params, beta)
    if not delta > 0:
        raise RateAssumptionError(f"non-positive delta {delta:g}")
    return delta


def _step_delta(method, params, x_k, x_next, rho):
    if method == "DQM":
        step = float(np.linalg.norm(np.asarray(x_next) - np.asarray(x_k)))
        return rate_constant("DQM", params, zeta(params.curvature, step))
    return rate_constant(method, params, rho)


def dadmm_rate_limit(params):
    """
    Limit of the DQM constant as ``zeta_k -> 0`` and ``mu' -> 1``:
    ``min((mu-1) gamma_o^2 / (mu Gamma_u^2), m / (c Gamma_u^2/4 + mu M^2/(c gamma_o^2)))``.
    """
    c, mu = params.c, params.mu
    m, M = params.curvature.m, params.curvature.M
    Gu, go = params.spectral.Gamma_u, params.spectral.gamma_o
    return min(
        (mu - 1.0) * go**2 / (mu * Gu**2),
        m / (c * Gu**2 / 4.0 + mu * M**2 / (c * go**2)),
    )


@dataclass
class CheckResult:
    """Outcome of one audit check over all iterations it applies to."""

    name: str
    status: str = "pass"  # pass | fail | skipped
    tolerance: float | None = None
    n_checked: int = 0
    n_failed: int = 0
    worst_value: float | None = None
    worst_margin: float | None = None
    worst_iteration: int | None = None
    first_failure: int | None = None
    reason: str | None = None

    def record(self, k, lhs, rhs):
        """Register ``lhs <= rhs`` at iteration ``k``."""
        self.n_checked += 1
        margin = rhs - lhs
        if self.worst_margin is None or margin < self.worst_margin:
            self.worst_margin = float(margin)
            self.worst_value = float(lhs)
            self.worst_iteration = int(k)
        if not lhs <= rhs:
            self.n_failed += 1
            self.status = "fail"
            if self.first_failure is None:
                self.first_failure = int(k)

    def skip(self, reason):
        self.status = "skipped"
        self.reason = reason


@dataclass
class AuditReport:
    method: str
    checks: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def ok(self):
        return all(c.status != "fail" for c in self.checks.values())

    def failed(self):
        return [c.name for c in self.checks.values() if c.status == "fail"]

    def to_dict(self):
        return {
            "schema": "audit",
            "version": 1,
            "method": self.method,
            "ok": self.ok,
            "checks": {k: asdict(v) for k, v in self.checks.items()},
            "info": self.info,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _stack_alpha(states, ops):
    """Recover every ``alpha_k``; report the worst column-space residual."""
    alphas, residuals = [], []
    for s in states:
        phi = _flat(s.phi)
        a = recover_alpha(phi, ops, check=False)
        alphas.append(a)
        residuals.append(float(np.linalg.norm(ops.E_o.T @ a - phi)))
    return alphas, residuals


def audit(states, problem, ops, cert, params, method, rho=None, full_states=None):
    """
    Check a recorded run against every identity and inequality that applies.

    Parameters
    ----------
    states : list of ReducedState
        Iterates ``k = 0..K`` of the reduced recursion.
    full_states : list of FullState, optional
        Matching run of the explicit recursion; adds the multiplier/primal
        identities and the reduced-vs-full agreement check.

    Returns
    -------
    AuditReport
        Hypothesis violations (``m = 0``, bipartite graph, ``c`` below the
        threshold) mark the affected checks ``skipped``; they are never
        reported as failures.
    """
    method = method.upper()
    curv = params.curvature
    c = params.c
    report = AuditReport(method)
    checks = report.checks

    def check(name, tol=None):
        checks[name] = CheckResult(name, tolerance=tol)
        return checks[name]

    col = check("column_space", COLUMN_TOL)
    alphas, col_res = _stack_alpha(states, ops)
    for s, r in zip(states, col_res):
        col.record(s.k, r, COLUMN_TOL)

    xs = [_flat(s.x) for s in states]
    zs = [0.5 * (ops.E_u @ x) for x in xs]
    if full_states is not None:
        zs = [_flat(f.z) for f in full_states]
    x_star = _flat(cert.x_star)
    grads = [aggregate_gradient(problem, x).ravel() for x in xs]
    grad_star = aggregate_gradient(problem, x_star).ravel()

    r1, r2, r3 = check("lemma3_relation1", LEMMA3_TOL), check("lemma3_relation2", LEMMA3_TOL), \
        check("lemma3_relation3", PRIMAL_TOL)
    eb = check("error_bound")
    errors, bounds = [], []
    for k in range(len(states) - 1):
        e, bound = approx_error(method, problem, xs[k], xs[k + 1], rho, curv)
        e = e.ravel()
        errors.append(e)
        bounds.append(bound)
        res1 = (
            grads[k + 1] - grad_star + e + ops.E_o.T @ (alphas[k + 1] - cert.alpha_star)
            - c * (ops.E_u.T @ (zs[k] - zs[k + 1]))
        )
        r1.record(k, float(np.linalg.norm(res1)), LEMMA3_TOL)
        res2 = 2.0 * (alphas[k + 1] - alphas[k]) - c * (ops.E_o @ (xs[k + 1] - x_star))
        r2.record(k, float(np.linalg.norm(res2)), LEMMA3_TOL)
        if method != "DADMM":
            eb.record(k + 1, float(np.linalg.norm(e)), bound * (1 + _BOUND_RTOL))
    for k, (x, z) in enumerate(zip(xs, zs)):
        res3 = ops.E_u @ (x - x_star) - 2.0 * (z - cert.z_star)
        r3.record(k, float(np.linalg.norm(res3)), PRIMAL_TOL)
    if method == "DADMM":
        eb.skip("DADMM minimizes the augmented Lagrangian exactly; no approximation error")

    if method == "DQM" and curv.L > 0:
        crossover = None
        for k in range(len(states) - 1):
            if 0.5 * curv.L * np.linalg.norm(xs[k + 1] - xs[k]) < 2.0 * curv.M:
                crossover = k
                break
        report.info["quadratic_branch_from"] = crossover

    V = [energy(z, a, cert, c) for z, a in zip(zs, alphas)]
    report.info["V_first"] = V[0]
    report.info["V_last"] = V[-1]
    floor = _ENERGY_FLOOR * max(V[0], 1e-300)

    cor = check("corollary1")
    if params.spectral.gamma_u <= 0:
        cor.skip("assumption violated: gamma_u > 0 (non-bipartite network)")
    else:
        coef = 4.0 / (c * params.spectral.gamma_u**2)
        for k, (x, v) in enumerate(zip(xs, V)):
            d = x - x_star
            cor.record(k, float(d @ d), coef * v + coef * floor)

    con = check("contraction")
    bad = params.violations(method, rho)
    if bad:
        con.skip("assumption violated: " + "; ".join(bad))
    else:
        deltas = [_step_delta(method, params, xs[k], xs[k + 1], rho)
                  for k in range(len(states) - 1)]
        for k, delta in enumerate(deltas):
            con.record(k + 1, V[k + 1], V[k] / (1.0 + delta) + floor)
        if deltas:
            report.info["delta_first"] = deltas[0]
            report.info["delta_last"] = deltas[-1]

    if full_states is not None:
        mult = check("lemma1_multipliers", PRIMAL_TOL)
        prim = check("lemma1_primal", PRIMAL_TOL)
        fcol = check("lemma1_column_space", COLUMN_TOL)
        agree = check("full_form_agreement", PRIMAL_TOL)
        for f, s in zip(full_states, states):
            mult.record(f.k, float(np.linalg.norm(f.alpha + f.beta)), PRIMAL_TOL)
            prim.record(f.k, float(np.linalg.norm(ops.E_u @ f.x - 2.0 * f.z)), PRIMAL_TOL)
            fcol.record(f.k, column_space_residual(f.alpha, ops.E_o), COLUMN_TOL)
            scale = max(1.0, float(np.linalg.norm(f.x)))
            agree.record(f.k, float(np.linalg.norm(_flat(s.x) - f.x)), PRIMAL_TOL * scale)
    return report


def trace_hook(problem, ops, cert, method, c, rho=None, params=None):
    """
    Build a :func:`dqm.solvers.run` hook filling the analysis columns.

    ``rel_err`` is ``||x_k - x*|| / ||x_0 - x*||``; ``V`` the energy;
    ``err_bound_lhs``/``rhs`` and ``delta_k`` describe the step that produced
    iterate ``k``. ``delta_k`` is left empty when the rate hypotheses fail.
    """
    method = method.upper()
    curv = params.curvature if params is not None else curvature_estimates(problem)
    x_star = _flat(cert.x_star)
    rate_ok = params is not None and not params.violations(method, rho)
    scale = {}

    def hook(prev, state):
        x = _flat(state.x)
        if prev is None:
            scale["x0"] = float(np.linalg.norm(x - x_star)) or 1.0
        z = 0.5 * (ops.E_u @ x)
        alpha = recover_alpha(state.phi, ops, check=False)
        row = {
            "rel_err": float(np.linalg.norm(x - x_star)) / scale["x0"],
            "V": energy(z, alpha, cert, c),
        }
        if prev is not None:
            if method != "DADMM":
                e, bound = approx_error(method, problem, prev.x, state.x, rho, curv)
                row["err_bound_lhs"] = float(np.linalg.norm(e))
                row["err_bound_rhs"] = bound
            if rate_ok:
                row["delta_k"] = _step_delta(method, params, prev.x, state.x, rho)
        return row

    return hook
