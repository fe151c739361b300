import numpy as np
import pytest

from dqm.data import generate_dataset, logistic_problem
from dqm.graph import Network, build_random_graph, incidence_operators
from dqm.objective import ConsensusProblem, QuadraticLocal


def quadratic_problem(net, p, seed, spread=(0.5, 2.0)):
    rng = np.random.default_rng(seed)
    locals_ = [
        QuadraticLocal(rng.standard_normal(p), np.diag(rng.uniform(*spread, size=p)))
        for _ in range(net.n)
    ]
    return ConsensusProblem(net.with_dimension(p), locals_)


def logistic(n, p, seed, reg=0.0, q=5, r_c=0.5, noise=0.3):
    net = build_random_graph(n, r_c, seed)
    ds = generate_dataset(n, q, p, seed + 1, noise)
    return logistic_problem(net, ds, reg)


@pytest.fixture
def triangle():
    return Network(3, ((0, 1), (0, 2), (1, 2)))


@pytest.fixture
def triangle_ops(triangle):
    return incidence_operators(triangle)
