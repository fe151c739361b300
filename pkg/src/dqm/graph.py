"""
Network topologies and the incidence/Laplacian operators built on them.

A network is symmetric: every undirected link ``{i, j}`` contributes both
ordered edges ``(i, j)`` and ``(j, i)``, so the number of directed edges is
``m = sum(degrees)``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ZERO_TOL",
    "MAX_RESAMPLES",
    "DisconnectedGraphError",
    "Network",
    "IncidenceOperators",
    "SpectralData",
    "build_random_graph",
    "complete_graph",
    "cycle_graph",
    "path_graph",
    "incidence_operators",
    "spectral_bounds",
    "is_connected",
]

ZERO_TOL = 1e-10
MAX_RESAMPLES = 1000


class DisconnectedGraphError(RuntimeError):
    """Raised when no connected sample is found within the retry cap."""


def is_connected(n, edges):
    """Breadth-first search from node 0 over undirected ``edges``."""
    if n == 0:
        return False
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in adj[i]:
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    return all(seen)


@dataclass(frozen=True)
class Network:
    """
    Symmetric, connected communication network.

    Parameters
    ----------
    n : int
        Number of nodes.
    edges : tuple of (int, int)
        Undirected links as ``(i, j)`` pairs with ``i < j``, sorted.
    p : int, optional
        Block dimension of the variable held at each node.
    seed : int or None, optional
        Seed the topology was generated from.
    r_c : float or None, optional
        Connectivity ratio used by the generator.
    accepted_seed : int or None, optional
        Sub-seed of the sample that was accepted (differs from ``seed``
        when disconnected samples were rejected).
    """

    n: int
    edges: tuple
    p: int = 1
    seed: int | None = None
    r_c: float | None = None
    accepted_seed: int | None = None

    def __post_init__(self):
        norm = tuple(sorted({(min(i, j), max(i, j)) for i, j in self.edges}))
        if len(norm) != len(self.edges):
            raise ValueError("duplicate undirected edges")
        for i, j in norm:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if not is_connected(self.n, norm):
            raise ValueError("network is not connected")
        object.__setattr__(self, "edges", norm)

    @cached_property
    def directed_edges(self):
        """Both orientations of every link, sorted lexicographically."""
        both = [(i, j) for i, j in self.edges] + [(j, i) for i, j in self.edges]
        return tuple(sorted(both))

    @property
    def m(self):
        return len(self.directed_edges)

    @cached_property
    def neighbors(self):
        """Ascending neighbor lists; this order fixes summation order."""
        nbrs = [[] for _ in range(self.n)]
        for i, j in self.directed_edges:
            nbrs[i].append(j)
        return tuple(tuple(sorted(a)) for a in nbrs)

    @cached_property
    def degrees(self):
        return np.array([len(a) for a in self.neighbors], dtype=float)

    @cached_property
    def adjacency(self):
        """Sparse symmetric 0/1 adjacency (n x n, CSR, sorted indices)."""
        rows = [i for i, _ in self.directed_edges]
        cols = [j for _, j in self.directed_edges]
        adj = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n)
        )
        adj.sort_indices()
        return adj

    def with_dimension(self, p):
        return Network(self.n, self.edges, p, self.seed, self.r_c, self.accepted_seed)

    def is_bipartite(self):
        color = [-1] * self.n
        for start in range(self.n):
            if color[start] >= 0:
                continue
            color[start] = 0
            queue = deque([start])
            while queue:
                i = queue.popleft()
                for j in self.neighbors[i]:
                    if color[j] < 0:
                        color[j] = 1 - color[i]
                        queue.append(j)
                    elif color[j] == color[i]:
                        return False
        return True


def build_random_graph(n, r_c, seed, p=1, max_resamples=MAX_RESAMPLES):
    """
    Sample a connected Erdos-Renyi graph ``G(n, r_c)``.

    Each unordered pair is linked independently with probability ``r_c``.
    Disconnected samples are rejected; attempt ``a >= 1`` draws from the
    sub-seed ``seed + 1000 + a``.

    Raises
    ------
    DisconnectedGraphError
        If ``max_resamples`` attempts all produced disconnected graphs.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0 < r_c <= 1:
        raise ValueError("r_c must lie in (0, 1]")
    iu, ju = np.triu_indices(n, k=1)
    for attempt in range(max_resamples):
        sub_seed = seed if attempt == 0 else seed + 1000 + attempt
        rng = np.random.default_rng(sub_seed)
        keep = rng.random(iu.size) < r_c
        edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
        if is_connected(n, edges):
            return Network(n, tuple(edges), p, seed, r_c, sub_seed)
    raise DisconnectedGraphError(
        f"no connected G({n}, {r_c}) sample in {max_resamples} attempts "
        f"from seed {seed}; r_c is too small for n"
    )


def complete_graph(n, p=1):
    return Network(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)), p)


def cycle_graph(n, p=1):
    return Network(n, tuple((i, (i + 1) % n) for i in range(n)), p)


def path_graph(n, p=1):
    return Network(n, tuple((i, i + 1) for i in range(n - 1)), p)


@dataclass(frozen=True, eq=False)
class IncidenceOperators:
    """
    Block incidence and Laplacian operators of a network.

    The ``mp x np`` incidence matrices are kept sparse. The ``np x np``
    Laplacians are small at the scales we run and are exposed dense as well.
    """

    network: Network
    A_s: sp.csr_matrix
    A_d: sp.csr_matrix
    E_o: sp.csr_matrix = field(init=False)
    E_u: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "E_o", (self.A_s - self.A_d).tocsr())
        object.__setattr__(self, "E_u", (self.A_s + self.A_d).tocsr())

    @property
    def n(self):
        return self.network.n

    @property
    def p(self):
        return self.network.p

    @property
    def m(self):
        return self.network.m

    @cached_property
    def L_o(self):
        return 0.5 * (self.E_o.T @ self.E_o).toarray()

    @cached_property
    def L_u(self):
        return 0.5 * (self.E_u.T @ self.E_u).toarray()

    @cached_property
    def D(self):
        return 0.5 * (self.L_u + self.L_o)

    @cached_property
    def scalar_L_o(self):
        """``n x n`` oriented Laplacian; ``L_o = scalar_L_o (x) I_p``."""
        deg = np.diag(self.network.degrees)
        return deg - self.network.adjacency.toarray()

    @cached_property
    def scalar_L_u(self):
        deg = np.diag(self.network.degrees)
        return deg + self.network.adjacency.toarray()

    @cached_property
    def L_o_pinv(self):
        """Pseudoinverse of ``2 L_o`` with eigenvalue cutoff ``ZERO_TOL``."""
        w, V = np.linalg.eigh(2.0 * self.scalar_L_o)
        inv = np.where(w > ZERO_TOL, 1.0 / np.where(w > ZERO_TOL, w, 1.0), 0.0)
        return np.kron((V * inv) @ V.T, np.eye(self.p))


def incidence_operators(net):
    """Materialize ``A_s``, ``A_d`` and the derived operators for ``net``."""
    p = net.p
    m = net.m
    src = np.array([i for i, _ in net.directed_edges], dtype=int)
    dst = np.array([j for _, j in net.directed_edges], dtype=int)
    # block (e, i) = I_p  ->  entries (e*p + r, i*p + r)
    rows = (np.arange(m)[:, None] * p + np.arange(p)).ravel()
    cols_s = (src[:, None] * p + np.arange(p)).ravel()
    cols_d = (dst[:, None] * p + np.arange(p)).ravel()
    ones = np.ones(m * p)
    shape = (m * p, net.n * p)
    A_s = sp.csr_matrix((ones, (rows, cols_s)), shape=shape)
    A_d = sp.csr_matrix((ones, (rows, cols_d)), shape=shape)
    return IncidenceOperators(net, A_s, A_d)


@dataclass(frozen=True)
class SpectralData:
    """Singular-value bounds of the incidence matrices."""

    gamma_u: float
    Gamma_u: float
    gamma_o: float
    bipartite_flag: bool


def spectral_bounds(ops):
    """
    Singular-value bounds of ``E_u`` and ``E_o``.

    ``sigma(E)^2`` are the eigenvalues of ``E^T E = 2L``. The Kronecker factor
    ``I_p`` only repeats eigenvalues, so the ``n x n`` scalar Laplacians are
    decomposed instead of the block ones.
    """
    eig_u = np.linalg.eigvalsh(2.0 * ops.scalar_L_u)
    eig_o = np.linalg.eigvalsh(2.0 * ops.scalar_L_o)
    bipartite = bool(eig_u[0] < ZERO_TOL)
    gamma_u = 0.0 if bipartite else float(np.sqrt(eig_u[0]))
    Gamma_u = float(np.sqrt(max(eig_u[-1], 0.0)))
    nonzero = eig_o[eig_o > ZERO_TOL]
    gamma_o = float(np.sqrt(nonzero[0])) if nonzero.size else 0.0
    return SpectralData(gamma_u, Gamma_u, gamma_o, bipartite)
