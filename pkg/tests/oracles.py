"""Independent reference computations shared by the test modules."""
import math

import numpy as np
from scipy import integrate as sci_integrate
from scipy import stats

from cmekit.network import Reaction, ReactionNetwork, propensity


def expect(states, probs, f):
    return math.fsum(p * f(x) for x, p in zip(states, probs))


def mono(x, alpha):
    v = 1.0
    for xi, a in zip(x, alpha):
        v *= float(xi) ** a
    return v


def generator_action(net, states, probs, alpha):
    """``sum_x p(x) sum_j a_j(x) ((x + v_j)^alpha - x^alpha)``."""
    total = []
    for x, p in zip(states, probs):
        for j, r in enumerate(net.reactions):
            a = propensity(net, j, x)
            if a:
                y = tuple(xi + vi for xi, vi in zip(x, r.change))
                total.append(p * a * (mono(y, alpha) - mono(x, alpha)))
    return math.fsum(total)


class Moments(dict):
    """Lazily computed raw moments of a finite distribution."""

    def __init__(self, states, probs):
        super().__init__()
        self.states, self.probs = states, probs

    def __missing__(self, alpha):
        v = expect(self.states, self.probs, lambda x: mono(x, alpha))
        self[alpha] = v
        return v


def central(states, probs, beta):
    n = len(beta)
    mu = [expect(states, probs, lambda x, i=i: x[i]) for i in range(n)]
    return expect(states, probs, lambda x: math.prod((x[i] - mu[i]) ** beta[i] for i in range(n)))


def random_network(rng, n):
    reactions = []
    for _ in range(rng.integers(2, 7)):
        while True:
            order = rng.integers(0, 3)
            lhs = [0] * n
            for i in rng.choice(n, size=order, replace=True):
                lhs[i] += 1
            rhs = [int(v) for v in rng.integers(0, 3, size=n)]
            if lhs != rhs:
                break
        reactions.append(Reaction(tuple(lhs), tuple(rhs), float(rng.uniform(0.1, 3.0))))
    return ReactionNetwork(tuple(f"S{i}" for i in range(n)), tuple(reactions), (0,) * n)


def random_distribution(rng, n):
    k = rng.integers(3, 12)
    states = [tuple(int(v) for v in rng.integers(0, 7, size=n)) for _ in range(k)]
    probs = rng.dirichlet(np.ones(k))
    return states, probs


def mixture_moments(weights, locs, sds, order):
    """Raw moments of a normal mixture truncated to [0, inf), by adaptive quadrature."""
    comps = [stats.truncnorm(-l / s, np.inf, loc=l, scale=s) for l, s in zip(locs, sds)]
    return [sum(w * c.moment(k) if k else w for w, c in zip(weights, comps)) for k in range(order + 1)]


def exp_poly_moments(coeffs, order, upper):
    """Moments of ``exp(-sum_j coeffs[j] x^j)`` on [0, inf), normalized, by adaptive quadrature."""
    def f(x, k):
        return x ** k * math.exp(-sum(c * x ** j for j, c in enumerate(coeffs)))

    pts = np.linspace(0, upper, 9)[1:-1]
    raw = [sci_integrate.quad(f, 0, upper, args=(k,), points=pts, epsabs=0, epsrel=1e-13, limit=400)[0]
           for k in range(order + 1)]
    return [r / raw[0] for r in raw]
