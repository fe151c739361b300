"""
Local objectives, the consensus problem, and curvature constants.

Stacked vectors (elements of R^{np}) are handled as ``(n, p)`` arrays whose
row ``i`` is node ``i``'s block; ``x.ravel()`` is the usual stacking.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import expit

__all__ = [
    "LOGISTIC_HESS_LIPSCHITZ",
    "LocalObjective",
    "QuadraticLocal",
    "LogisticLocal",
    "ConsensusProblem",
    "CurvatureEstimates",
    "aggregate_eval",
    "aggregate_gradient",
    "aggregate_hessian",
    "curvature_estimates",
    "softplus",
]

# sup_t |sigma''(t)|, attained at sigma = 1/2 +- 1/(2 sqrt 3)
LOGISTIC_HESS_LIPSCHITZ = 1.0 / (6.0 * math.sqrt(3.0))

_SERIES_RADIUS = 0.05
_SERIES_TERMS = 14


def softplus(t):
    """``log(1 + exp(t))`` without overflow."""
    t = np.asarray(t, dtype=float)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


class LocalObjective(abc.ABC):
    """A twice differentiable function of a ``p``-vector."""

    dim: int

    @abc.abstractmethod
    def value(self, x): ...

    @abc.abstractmethod
    def gradient(self, x): ...

    @abc.abstractmethod
    def hessian(self, x): ...

    @abc.abstractmethod
    def curvature(self):
        """Return ``(m, M, L)`` bounds valid for this local function."""

    def taylor_remainder(self, x, dx):
        """
        ``grad(x + dx) - grad(x) - hessian(x) @ dx``.

        Subclasses override this with a cancellation-free evaluation; the
        default subtracts directly and is only accurate to roundoff of the
        gradient magnitude.
        """
        x = np.asarray(x, dtype=float)
        dx = np.asarray(dx, dtype=float)
        return self.gradient(x + dx) - self.gradient(x) - self.hessian(x) @ dx


class QuadraticLocal(LocalObjective):
    """``f(x) = 1/2 (x - b)^T Q (x - b)`` with ``Q`` symmetric positive definite."""

    def __init__(self, b, Q=None):
        self.b = np.array(b, dtype=float).ravel()
        self.dim = self.b.size
        if Q is None:
            Q = np.eye(self.dim)
        self.Q = np.array(Q, dtype=float).reshape(self.dim, self.dim)
        if not np.allclose(self.Q, self.Q.T, rtol=0, atol=1e-14):
            raise ValueError("Q must be symmetric")

    def value(self, x):
        r = np.asarray(x, dtype=float) - self.b
        return 0.5 * float(r @ self.Q @ r)

    def gradient(self, x):
        return self.Q @ (np.asarray(x, dtype=float) - self.b)

    def hessian(self, x):
        return self.Q.copy()

    def curvature(self):
        w = np.linalg.eigvalsh(self.Q)
        return float(w[0]), float(w[-1]), 0.0

    def taylor_remainder(self, x, dx):
        return np.zeros(self.dim)

    def __repr__(self):
        return f"QuadraticLocal(dim={self.dim})"


@lru_cache(maxsize=None)
def _sigmoid_derivative_polys(order):
    """
    Coefficients ``K_j`` with ``sigma^{(j)}(t) = (1 - w^2) K_j(w)``,
    ``w = tanh(t/2)``, for ``j = 1..order``.

    Uses ``dw/dt = (1 - w^2)/2``.
    """
    one_minus_w2 = np.array([1.0, 0.0, -1.0])
    polys = [np.array([0.25])]
    for _ in range(order - 1):
        k = polys[-1]
        nxt = P.polyadd(P.polymul([0.0, -2.0], k), P.polymul(one_minus_w2, P.polyder(k)))
        polys.append(0.5 * np.atleast_1d(nxt))
    return tuple(polys)


@lru_cache(maxsize=None)
def _series_matrix(order):
    """``C[i, j-2]`` = coefficient of ``w^i`` in ``K_j / j!``, ``j = 2..order``."""
    polys = _sigmoid_derivative_polys(order)
    C = np.zeros((max(len(k) for k in polys), order - 1))
    fact = 1.0
    for j in range(2, order + 1):
        fact *= j
        k = polys[j - 1]
        C[: len(k), j - 2] = k / fact
    return C


def _sigmoid_remainder(t, d):
    """``sigma(t + d) - sigma(t) - sigma'(t) d`` evaluated without cancellation."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    u = expit(t)
    v = expit(-t)
    uv4 = 4.0 * u * v  # 1 - w^2, accurate for large |t|
    w = np.tanh(0.5 * t)  # u - v cancels near t = 0
    out = np.empty_like(t)

    small = np.abs(d) <= _SERIES_RADIUS
    if np.any(small):
        ws, ds, cs = w[small], d[small], uv4[small]
        C = _series_matrix(_SERIES_TERMS)
        coef = np.vander(ws, C.shape[0], increasing=True) @ C
        dpow = np.vander(ds, _SERIES_TERMS + 1, increasing=True)[:, 2:]
        out[small] = cs * np.sum(coef * dpow, axis=1)

    big = ~small
    if np.any(big):
        tb, db = t[big], d[big]
        # sigma(a) - sigma(b) = -sigma(a) sigma(-b) expm1(-(a - b))
        diff = -expit(tb + db) * v[big] * np.expm1(-db)
        out[big] = diff - u[big] * v[big] * db
    return out


class LogisticLocal(LocalObjective):
    """
    Logistic loss over ``q`` labelled samples plus an optional ridge term.

    ``f(x) = sum_l log(1 + exp(-y_l s_l^T x)) + (reg/2) ||x||^2``
    """

    def __init__(self, samples, labels, reg=0.0):
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        self.labels = np.asarray(labels, dtype=float).ravel()
        if self.samples.shape[0] != self.labels.size:
            raise ValueError("one label per sample required")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if reg < 0:
            raise ValueError("reg must be non-negative")
        self.reg = float(reg)
        self.dim = self.samples.shape[1]
        self._ys = self.samples * self.labels[:, None]

    def margins(self, x):
        return self._ys @ np.asarray(x, dtype=float)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(np.sum(softplus(-self.margins(x)))) + 0.5 * self.reg * float(x @ x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return -self._ys.T @ expit(-self.margins(x)) + self.reg * x

    def hessian(self, x):
        t = self.margins(x)
        w = expit(t) * expit(-t)
        H = (self.samples.T * w) @ self.samples
        H = 0.5 * (H + H.T)
        H.flat[:: self.dim + 1] += self.reg
        return H

    def curvature(self):
        sq = np.sum(self.samples**2, axis=1)
        M = self.reg + 0.25 * float(np.sum(sq))
        L = LOGISTIC_HESS_LIPSCHITZ * float(np.sum(sq**1.5))
        return self.reg, M, L

    def taylor_remainder(self, x, dx):
        t = self.margins(x)
        d = self._ys @ np.asarray(dx, dtype=float)
        return self._ys.T @ _sigmoid_remainder(t, d)

    def __repr__(self):
        return f"LogisticLocal(q={self.labels.size}, dim={self.dim}, reg={self.reg})"


@dataclass(frozen=True)
class ConsensusProblem:
    """``n`` local objectives of common dimension ``p`` placed on a network."""

    network: object
    locals: tuple

    def __post_init__(self):
        object.__setattr__(self, "locals", tuple(self.locals))
        if len(self.locals) != self.network.n:
            raise ValueError(
                f"{len(self.locals)} local objectives for {self.network.n} nodes"
            )
        dims = {f.dim for f in self.locals}
        if len(dims) != 1:
            raise ValueError(f"local objectives disagree on dimension: {sorted(dims)}")
        (p,) = dims
        if self.network.p != p:
            object.__setattr__(self, "network", self.network.with_dimension(p))

    @property
    def n(self):
        return self.network.n

    @property
    def p(self):
        return self.locals[0].dim

    def as_blocks(self, x):
        x = np.asarray(x, dtype=float)
        if x.size != self.n * self.p:
            raise ValueError(f"expected {self.n * self.p} entries, got {x.size}")
        return x.reshape(self.n, self.p)

    def global_value(self, x_tilde):
        return sum(f.value(x_tilde) for f in self.locals)

    def global_gradient(self, x_tilde):
        return sum(f.gradient(x_tilde) for f in self.locals)

    def global_hessian(self, x_tilde):
        return sum(f.hessian(x_tilde) for f in self.locals)


def aggregate_eval(problem, x):
    """
    Evaluate ``f(x) = sum_i f_i(x_i)`` on a stacked vector.

    Returns
    -------
    value : float
    gradient : ndarray, shape (n, p)
    hessian_blocks : ndarray, shape (n, p, p)
        Diagonal blocks of the (block diagonal) aggregate Hessian.
    """
    X = problem.as_blocks(x)
    value = 0.0
    grad = np.empty_like(X)
    hess = np.empty((problem.n, problem.p, problem.p))
    for i, f in enumerate(problem.locals):
        value += f.value(X[i])
        grad[i] = f.gradient(X[i])
        hess[i] = f.hessian(X[i])
    return value, grad, hess


def aggregate_gradient(problem, x):
    X = problem.as_blocks(x)
    return np.stack([f.gradient(X[i]) for i, f in enumerate(problem.locals)])


def aggregate_hessian(problem, x):
    X = problem.as_blocks(x)
    return np.stack([f.hessian(X[i]) for i, f in enumerate(problem.locals)])


@dataclass(frozen=True)
class CurvatureEstimates:
    """
    Hessian eigenvalue bounds ``m <= eig <= M`` and Hessian Lipschitz ``L``.

    ``m == 0`` means strong convexity is not certified.
    """

    m: float
    M: float
    L: float

    @property
    def strongly_convex(self):
        return self.m > 0


def curvature_estimates(problem):
    """Aggregate the per-node bounds: smallest ``m``, largest ``M`` and ``L``."""
    bounds = np.array([f.curvature() for f in problem.locals], dtype=float)
    m = float(bounds[:, 0].min())
    M = float(bounds[:, 1].max())
    L = float(bounds[:, 2].max())
    return CurvatureEstimates(max(m, 0.0), M, L)
