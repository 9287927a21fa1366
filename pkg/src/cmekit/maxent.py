"""Maximum-entropy reconstruction of one-dimensional distributions from raw moments.

Given ``mu_0 = 1, mu_1, ..., mu_M`` on ``[0, inf)`` the density maximizing
entropy has the form ``q(x) = exp(-sum_k lambda_k x^k) / Z``. The multipliers
minimize the convex dual ``ln Z(lambda) + sum_k lambda_k mu_k``.

The problem is solved in standardized coordinates ``y = (x - shift) / scale``
with the exponent written in orthonormal probabilists' Hermite polynomials
``phi_k = He_k / sqrt(k!)``. At the standard normal the dual Hessian is then
the identity, which makes plain BFGS with a unit initial inverse Hessian
well scaled. Integrals use a composite Gauss-Legendre rule over the bulk and
Gauss-Laguerre rules on unbounded tails, evaluated in the log domain.

The density is finally integrated over lattice bins around every count (step
1, or step 2 for species that only change in pairs) to obtain probabilities.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special

log = logging.getLogger(__name__)

__all__ = [
    "MaxEntError",
    "InfeasibleMomentsError",
    "MaxEntConvergenceError",
    "MomentConstraints",
    "MaxEntOptions",
    "Transform",
    "QuadratureRule",
    "MaxEntSolution",
    "hermite_basis",
    "precondition",
    "build_halfline_rule",
    "build_rule",
    "dual_and_gradient",
    "solve_dual",
    "analytic_maxent",
    "fit_truncated_normal",
    "discretize",
    "reconstruct",
    "write_reconstruction_csv",
    "read_reconstruction_csv",
]

HALF_LINE = "half_line"
FULL_LINE = "full_line"
# internal: half-line support cut off at a finite upper edge
_BOUNDED = "bounded"

_GL_POINTS = 16
_LAGUERRE_POINTS = 32
_TOP_START = 1e-3
_MAX_HALF_WIDTH = 12.0


class MaxEntError(RuntimeError):
    pass


class InfeasibleMomentsError(MaxEntError):
    """No integrable maximum-entropy density matches the moments."""


class MaxEntConvergenceError(MaxEntError):
    def __init__(self, message, lambdas=None, grad_norm=math.nan, iterations=0):
        super().__init__(message)
        self.lambdas = lambdas
        self.grad_norm = grad_norm
        self.iterations = iterations


# ---------------------------------------------------------------------------
# constraints and preconditioning


@dataclass(frozen=True)
class MomentConstraints:
    """Raw moments ``mu_0..mu_M`` of a distribution on ``[0, inf)`` or the real line."""

    moments: tuple
    support: str = HALF_LINE

    def __post_init__(self):
        mu = tuple(float(m) for m in self.moments)
        object.__setattr__(self, "moments", mu)
        if self.support not in (HALF_LINE, FULL_LINE):
            raise ValueError(f"unknown support {self.support!r}")
        if len(mu) < 2:
            raise ValueError("need at least mu_0 and mu_1")
        if abs(mu[0] - 1.0) > 1e-12:
            raise ValueError(f"mu_0 must be 1, got {mu[0]!r}")
        if not all(math.isfinite(m) for m in mu):
            raise ValueError("moments must be finite")
        if self.support == HALF_LINE and mu[1] <= 0:
            raise InfeasibleMomentsError("a distribution on [0, inf) needs a positive mean")

    @property
    def order(self) -> int:
        return len(self.moments) - 1

    @property
    def variance(self) -> float:
        return self.moments[2] - self.moments[1] ** 2 if self.order >= 2 else math.nan

    def realizable(self) -> bool:
        return self.order < 2 or self.variance > 0

    def hankel_margin(self) -> float:
        """Smallest relative eigenvalue of the moment Hankel matrices.

        Moments of some distribution on the support make every matrix
        positive semidefinite: ``[mu_{i+j}]`` always, and ``[mu_{i+j+1}]``
        as well on ``[0, inf)``. Moments are scaled by the mean first.
        """
        mu = np.asarray(self.moments)
        M = self.order
        scale = abs(mu[1]) if mu[1] != 0 else 1.0
        m = mu / scale ** np.arange(M + 1)
        mats = [np.array([[m[i + j] for j in range(M // 2 + 1)] for i in range(M // 2 + 1)])]
        if self.support == HALF_LINE:
            k = (M - 1) // 2 + 1
            mats.append(np.array([[m[i + j + 1] for j in range(k)] for i in range(k)]))
        out = math.inf
        for H in mats:
            ev = np.linalg.eigvalsh(H)
            out = min(out, float(ev[0] / max(abs(ev[-1]), 1e-300)))
        return out


@dataclass(frozen=True)
class MaxEntOptions:
    tol: float = 1e-8
    max_iter: int = 500
    nodes: int = 128
    max_nodes: int = 1024
    lnz_tol: float = 1e-10
    force_numeric: bool = False
    # when no half-line density exists, solve on [0, shift + upper_bound * scale]
    bounded_fallback: bool = True
    upper_bound: float | None = None

    def fallback_edge(self) -> float:
        """Standardized upper edge of the fallback support (Gauss-Hermite node extent)."""
        return math.sqrt(2.0 * self.nodes) if self.upper_bound is None else float(self.upper_bound)


@lru_cache(maxsize=16)
def _hermite_basis_cached(order: int) -> np.ndarray:
    B = np.zeros((order + 1, order + 1))
    B[0, 0] = 1.0
    if order >= 1:
        B[1, 1] = 1.0
    # He_{k+1} = y He_k - k He_{k-1}, on unnormalized rows
    for k in range(1, order):
        B[k + 1, 1:] = B[k, :-1]
        B[k + 1] -= k * B[k - 1]
    for k in range(order + 1):
        B[k] /= math.sqrt(math.factorial(k))
    B.setflags(write=False)
    return B


def hermite_basis(order: int) -> np.ndarray:
    """Rows hold monomial coefficients of ``He_k(y) / sqrt(k!)``, ``k = 0..order``."""
    return _hermite_basis_cached(int(order))


def _binomial_shift(mu, shift, scale):
    """Raw moments of ``(X - shift) / scale`` from raw moments of ``X``."""
    out = []
    for k in range(len(mu)):
        terms = [math.comb(k, j) * mu[j] * (-shift) ** (k - j) for j in range(k + 1)]
        out.append(math.fsum(terms) / scale ** k)
    return np.array(out)


@dataclass(frozen=True)
class Transform:
    """Affine standardization ``y = (x - shift) / scale`` plus the Hermite basis."""

    shift: float
    scale: float
    order: int

    @property
    def basis(self) -> np.ndarray:
        return hermite_basis(self.order)

    def to_standard(self, x):
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def to_original(self, y):
        return self.shift + self.scale * np.asarray(y, dtype=float)

    def standardized_moments(self, mu) -> np.ndarray:
        return _binomial_shift(list(mu), self.shift, self.scale)

    def original_moments(self, ymoments) -> np.ndarray:
        """Inverse of :meth:`standardized_moments`."""
        return _binomial_shift(list(ymoments), -self.shift / self.scale, 1.0 / self.scale)

    def monomial_coefficients(self, lambdas) -> np.ndarray:
        """Coefficients ``c_0..c_M`` with ``sum_k lambda_k phi_k((x - shift)/scale) = sum_j c_j x^j``."""
        lam = np.concatenate(([0.0], np.asarray(lambdas, dtype=float)))
        ycoef = lam @ self.basis  # exponent as a polynomial in y
        M = self.order
        out = np.zeros(M + 1)
        for k in range(M + 1):
            # y^k = sum_j C(k, j) x^j (-shift)^(k-j) / scale^k
            for j in range(k + 1):
                out[j] += ycoef[k] * math.comb(k, j) * (-self.shift) ** (k - j) / self.scale ** k
        return out


def precondition(c: MomentConstraints):
    """Standardize the moments; returns ``(standardized moments, transform)``.

    ``shift`` is the mean and ``scale`` the standard deviation; with a single
    moment the scale is ``max(mu_1, 1)``.
    """
    mu = c.moments
    if c.order == 1:
        shift, scale = mu[1], max(abs(mu[1]), 1.0)
    else:
        var = c.variance
        if not var > 0:
            raise InfeasibleMomentsError(f"non-positive variance {var!r}")
        shift, scale = mu[1], math.sqrt(var)
    t = Transform(shift, scale, c.order)
    y = t.standardized_moments(mu)
    y[0] = 1.0
    if c.order >= 1:
        y[1] = 0.0
    if c.order >= 2:
        y[2] = 1.0
    return y, t


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and log-weights for an integral over ``[lower, inf)`` or the whole line."""

    nodes: np.ndarray
    log_weights: np.ndarray
    lower: float = -math.inf

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def integrate(self, f) -> float:
        return math.fsum(self.weights * f(self.nodes))

    def log_integrate_exp(self, logf) -> float:
        """``ln of the integral of exp(logf(x))``, stable for large exponents."""
        return float(special.logsumexp(logf(self.nodes) + self.log_weights))


@lru_cache(maxsize=None)
def _gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


@lru_cache(maxsize=None)
def _gauss_laguerre(n: int):
    x, w = np.polynomial.laguerre.laggauss(n)
    # fold the e^{-u} weight back in: int g(u) du = sum w e^u g(u)
    return x, np.log(w) + x


def _panels(a: float, b: float, count: int):
    edges = np.linspace(a, b, count + 1)
    t, w = _gauss_legendre(_GL_POINTS)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, np.log(weights)


def build_rule(node_count: int, lower: float = 0.0, center: float = 0.0,
               half_width: float | None = None, upper: float | None = None) -> QuadratureRule:
    """Quadrature for ``int_lower^inf`` (``lower=-inf`` for the whole line).

    With a finite ``upper`` the rule covers ``[lower, upper]`` by panels of
    the bulk width only.

    The bulk ``[center - W, center + W]`` with ``W = min(sqrt(2 * node_count), 12)``
    (the extent of the ``node_count``-point Gauss-Hermite nodes, capped so
    that more nodes refine rather than widen the bulk) is covered by
    ``node_count / 16`` Gauss-Legendre panels. Beyond it, Gauss-Laguerre
    rules take the unbounded tails; a finite stretch between ``lower`` and
    the bulk gets extra panels of the same width.
    """
    if node_count < 2:
        raise ValueError("node_count must be at least 2")
    W = min(math.sqrt(2.0 * node_count), _MAX_HALF_WIDTH) if half_width is None else float(half_width)
    n_panels = max(1, node_count // _GL_POINTS)
    width = 2.0 * W / n_panels
    lo, hi = center - W, center + W
    if upper is not None:
        if not (math.isfinite(lower) and upper > lower):
            raise ValueError("a bounded rule needs finite lower < upper")
        nodes, logw = _panels(lower, upper, max(1, math.ceil((upper - lower) / width)))
        return QuadratureRule(nodes, logw, float(lower))
    parts = []
    if lower >= hi:
        lo = lower
        u, lw = _gauss_laguerre(_LAGUERRE_POINTS)
        parts.append((lower + u, lw))
        nodes = np.concatenate([p[0] for p in parts])
        return QuadratureRule(nodes, np.concatenate([p[1] for p in parts]), float(lower))
    if lower > lo:
        k = max(1, math.ceil((hi - lower) / width))
        parts.append(_panels(lower, hi, k))
    else:
        parts.append(_panels(lo, hi, n_panels))
        if math.isinf(lower):
            u, lw = _gauss_laguerre(_LAGUERRE_POINTS)
            parts.append((lo - u, lw))
        elif lower < lo:
            k = min(max(1, math.ceil((lo - lower) / width)), 4 * n_panels)
            parts.append(_panels(lower, lo, k))
    u, lw = _gauss_laguerre(_LAGUERRE_POINTS)
    parts.append((hi + u, lw))
    nodes = np.concatenate([p[0] for p in parts])
    logw = np.concatenate([p[1] for p in parts])
    order = np.argsort(nodes, kind="stable")
    return QuadratureRule(nodes[order], logw[order], float(lower))


def build_halfline_rule(node_count: int, lower: float = 0.0, center: float = 0.0) -> QuadratureRule:
    """Rule for ``int_lower^inf f``; see :func:`build_rule`."""
    return build_rule(node_count, lower=lower, center=center)


# ---------------------------------------------------------------------------
# dual


def _integrable(lambdas, support: str) -> bool:
    if support == _BOUNDED:
        return bool(np.all(np.isfinite(lambdas)))
    nz = np.flatnonzero(np.asarray(lambdas) != 0.0)
    if nz.size == 0:
        return False
    k = nz[-1]
    if lambdas[k] <= 0:
        return False
    degree = k + 1
    return support == HALF_LINE or degree % 2 == 0


def _basis_values(y, order):
    B = hermite_basis(order)
    V = np.vander(np.asarray(y, dtype=float), order + 1, increasing=True)
    return V @ B.T  # (nodes, order + 1)


def dual_and_gradient(lambdas, targets, rule: QuadratureRule, support: str = HALF_LINE,
                      basis_values=None):
    """Dual value ``ln Z + sum lambda_k t_k`` and gradient ``t_k - E_q[phi_k]``.

    ``targets`` are ``E[phi_k]`` for ``k = 1..M`` (a leading ``k = 0`` entry is
    ignored). Non-integrable multipliers return ``(inf, None)``.
    """
    lam = np.asarray(lambdas, dtype=float)
    t = np.asarray(targets, dtype=float)
    if t.shape[0] == lam.shape[0] + 1:
        t = t[1:]
    if not _integrable(lam, support):
        return math.inf, None
    Phi = basis_values if basis_values is not None else _basis_values(rule.nodes, lam.shape[0])
    expo = -(Phi[:, 1:] @ lam) + rule.log_weights
    if not np.all(np.isfinite(expo[np.isfinite(rule.log_weights)])):
        return math.inf, None
    lnz = float(special.logsumexp(expo))
    if not math.isfinite(lnz):
        return math.inf, None
    q = np.exp(expo - lnz)
    mean_phi = q @ Phi[:, 1:]
    psi = lnz + float(lam @ t)
    return psi, t - mean_phi


def dual_hessian(lambdas, rule: QuadratureRule, basis_values=None) -> np.ndarray:
    """Covariance matrix of ``phi_1..phi_M`` under the current density."""
    lam = np.asarray(lambdas, dtype=float)
    Phi = basis_values if basis_values is not None else _basis_values(rule.nodes, lam.shape[0])
    P = Phi[:, 1:]
    expo = -(P @ lam) + rule.log_weights
    q = np.exp(expo - special.logsumexp(expo))
    m = q @ P
    return (P * q[:, None]).T @ P - np.outer(m, m)


# ---------------------------------------------------------------------------
# solution object


@dataclass
class MaxEntSolution:
    """Multipliers in the standardized Hermite basis and everything to evaluate the density."""

    lambdas: np.ndarray
    log_normalizer: float
    transform: Transform
    support: str = HALF_LINE
    grad_norm: float = 0.0
    iterations: int = 0
    nodes: int = 0
    method: str = "bfgs"
    projected: bool = False
    moments: tuple = ()
    upper: float = math.inf

    @property
    def bounded(self) -> bool:
        """True when the density was fitted on a finite support ``[0, upper]``."""
        return math.isfinite(self.upper)

    @property
    def order(self) -> int:
        return self.lambdas.shape[0]

    @property
    def lower(self) -> float:
        """Support bound in standardized coordinates."""
        if self.support == FULL_LINE:
            return -math.inf
        return (0.0 - self.transform.shift) / self.transform.scale

    def exponent_standard(self, y) -> np.ndarray:
        return _basis_values(np.atleast_1d(y), self.order)[:, 1:] @ self.lambdas

    def log_density_standard(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = -self.exponent_standard(y) - self.log_normalizer
        if self.support == HALF_LINE:
            out = np.where((y >= self.lower) & (y <= self.upper), out, -np.inf)
        return out

    def density_standard(self, y) -> np.ndarray:
        return np.exp(self.log_density_standard(y))

    def density(self, x) -> np.ndarray:
        """Reconstructed density in original coordinates."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = self.transform.to_standard(x)
        return np.exp(self.log_density_standard(y) - math.log(self.transform.scale))

    def monomial_coefficients(self) -> np.ndarray:
        """``c`` with ``q(x) = exp(-sum_j c_j x^j)``; ``c_0`` holds the normalization."""
        c = self.transform.monomial_coefficients(self.lambdas)
        c[0] += self.log_normalizer + math.log(self.transform.scale)
        return c

    def rule(self, node_count: int | None = None) -> QuadratureRule:
        return build_rule(node_count or max(self.nodes, 256), lower=self.lower,
                          upper=self.upper if self.bounded else None)

    def raw_moments(self, order: int | None = None, node_count: int | None = None) -> np.ndarray:
        """Raw moments ``E[X^k]``, ``k = 0..order``, of the reconstructed density."""
        order = self.order if order is None else order
        rule = self.rule(node_count)
        logq = self.log_density_standard(rule.nodes) + rule.log_weights
        q = np.exp(logq)
        ym = np.array([math.fsum(q * rule.nodes ** k) for k in range(order + 1)])
        return self.transform.original_moments(ym)

    def summary(self) -> str:
        lam = ";".join(repr(float(v)) for v in self.lambdas)
        return (f"lambdas={lam}, lnZ={self.log_normalizer!r}, "
                f"transform=({self.transform.shift!r};{self.transform.scale!r}), "
                f"grad_norm={self.grad_norm!r}, iters={self.iterations}")


# ---------------------------------------------------------------------------
# analytic cases


def _quadratic_log_partition(l1: float, l2: float, lower: float) -> float:
    """``ln int_lower^inf exp(-l1 phi_1(y) - l2 phi_2(y)) dy`` for ``l2 > 0``."""
    a = l2 / math.sqrt(2.0)  # coefficient of y^2
    # exponent: -a y^2 - l1 y + a
    m = -l1 / (2.0 * a)
    base = a + l1 * l1 / (4.0 * a) + 0.5 * math.log(math.pi / a)
    if math.isinf(lower):
        return base
    z = math.sqrt(2.0 * a) * (lower - m)
    return base + float(special.log_ndtr(-z))


def _linear_log_partition(l1: float, lower: float) -> float:
    return -l1 * lower - math.log(l1)


def _inverse_mills(alpha):
    # phi(alpha) / (1 - Phi(alpha)), stable for large |alpha|
    return math.sqrt(2.0 / math.pi) / special.erfcx(alpha / math.sqrt(2.0))


def _truncnorm_cv2(alpha: float) -> float:
    psi = _inverse_mills(alpha)
    var = 1.0 + alpha * psi - psi * psi
    return var / (psi - alpha) ** 2


def fit_truncated_normal(mean: float, var: float) -> tuple[float, float]:
    """Location and standard deviation of a normal truncated to ``[0, inf)`` with given moments.

    The squared coefficient of variation of a truncated normal depends only
    on the standardized truncation point ``alpha = -loc / sd`` and increases
    from 0 to 1, so a one-dimensional bracketing root find suffices.
    """
    if not (mean > 0 and var > 0):
        raise InfeasibleMomentsError("truncated normal needs positive mean and variance")
    r = var / (mean * mean)
    if r >= 1.0:
        raise InfeasibleMomentsError(
            f"coefficient of variation {math.sqrt(r):.6g} >= 1: no truncated normal matches"
        )
    target = math.log(r)

    def g(alpha):
        return math.log(_truncnorm_cv2(alpha)) - target

    lo = -2.0 / math.sqrt(r) - 10.0
    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
        if hi > 1e8:
            raise InfeasibleMomentsError("coefficient of variation too close to 1")
    if g(lo) > 0:
        # untruncated for all practical purposes
        return mean, math.sqrt(var)
    alpha = optimize.brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    sd = mean / (_inverse_mills(alpha) - alpha)
    return -alpha * sd, sd


def analytic_maxent(c: MomentConstraints, options: MaxEntOptions | None = None) -> MaxEntSolution:
    """Closed-form maximum-entropy densities for one or two moments.

    One moment on the half-line gives an exponential, two on the full line a
    normal, two on the half-line a normal truncated at zero.
    """
    options = options or MaxEntOptions()
    if c.order not in (1, 2):
        raise ValueError("closed forms exist only for one or two moments")
    y, tr = precondition(c)
    lower = -math.inf if c.support == FULL_LINE else -tr.shift / tr.scale
    if c.order == 1:
        if c.support == FULL_LINE:
            raise InfeasibleMomentsError("one moment on the whole line has no maximum-entropy density")
        rate = 1.0 / c.moments[1]
        lam = np.array([rate * tr.scale])
        lnz = _linear_log_partition(lam[0], lower)
        method = "exponential"
    elif c.support == FULL_LINE:
        lam = np.array([0.0, 1.0 / math.sqrt(2.0)])
        lnz = _quadratic_log_partition(0.0, lam[1], -math.inf)
        method = "normal"
    else:
        loc, sd = fit_truncated_normal(c.moments[1], c.variance)
        s, sc = tr.shift, tr.scale
        lam = np.array([sc * (s - loc) / sd ** 2, sc * sc / (math.sqrt(2.0) * sd * sd)])
        lnz = _quadratic_log_partition(lam[0], lam[1], lower)
        method = "truncated_normal"
    sol = MaxEntSolution(lam, lnz, tr, c.support, 0.0, 0, options.nodes, method, False, c.moments)
    rule = build_rule(options.nodes, lower=lower)
    targets = hermite_basis(c.order) @ y
    _, grad = dual_and_gradient(lam, targets, rule, c.support)
    sol.grad_norm = float(np.linalg.norm(grad)) if grad is not None else math.nan
    return sol


# ---------------------------------------------------------------------------
# numerical solve


def _bfgs(fg, x0, tol, max_iter, max_step=None, hessian=None):
    """BFGS with Armijo backtracking; ``fg`` returns ``(f, grad)`` or ``(inf, None)``.

    ``max_step(x, d)`` optionally bounds the trial step along ``d``.
    ``hessian(x)``, if given, seeds the inverse-Hessian approximation at the
    start and after every restart; otherwise the identity is used.
    """
    c1, shrink = 1e-4, 0.5
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    if g is None:
        raise InfeasibleMomentsError("starting point is not integrable")
    n = x.shape[0]

    def initial(x):
        if hessian is not None:
            try:
                Hx = hessian(x)
                inv = np.linalg.inv(Hx)
                if np.all(np.isfinite(inv)) and np.all(np.linalg.eigvalsh(0.5 * (inv + inv.T)) > 0):
                    return 0.5 * (inv + inv.T)
            except np.linalg.LinAlgError:
                pass
        return np.eye(n)

    H = initial(x)
    seeded = hessian is not None
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return x, f, g, it - 1
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0:
            H = initial(x)
            d = -H @ g
            slope = float(g @ d)
        if slope >= 0:
            H = np.eye(n)
            d = -g
            slope = float(g @ d)
        step = 1.0 if max_step is None else min(1.0, max_step(x, d))
        if step < 0.1 and float(np.linalg.norm(g[:-1])) > tol:
            # the bound on the last coordinate would stall the search: move the others only
            dp = d.copy()
            dp[-1] = 0.0
            if float(g @ dp) >= 0:
                dp = -g.copy()
                dp[-1] = 0.0
            d, slope, step = dp, float(g @ dp), 1.0
        slack = 4.0 * np.finfo(float).eps * abs(f)
        while True:
            xn = x + step * d
            fn, gn = fg(xn)
            if gn is not None and fn <= f + c1 * step * slope + slack:
                break
            step *= shrink
            if step < 1e-20:
                raise MaxEntConvergenceError(
                    f"line search failed after {it} iterations (gradient norm {gnorm:.3g})",
                    x, gnorm, it,
                )
        s = xn - x
        yv = gn - g
        sy = float(s @ yv)
        x, f, g = xn, fn, gn
        if sy > 1e-300:
            if it == 1 and not seeded:
                H = np.eye(n) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            Hy = H @ yv
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(yv @ Hy) + rho) * np.outer(s, s)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return x, f, g, it
    raise MaxEntConvergenceError(
        f"no convergence within {max_iter} iterations (gradient norm {gnorm:.3g})", x, gnorm, it
    )


def _newton(fg, hessian, x0, tol, max_iter):
    """Damped Newton with Armijo backtracking for duals defined everywhere.

    On a bounded support every multiplier vector is admissible and the exact
    Hessian is cheap, so Newton converges where BFGS stalls on the badly
    conditioned problems that reach the bounded fallback.
    """
    c1, shrink = 1e-4, 0.5
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    if g is None:
        raise MaxEntConvergenceError("starting point is not integrable", x, math.nan, 0)
    for it in range(max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return x, f, g, it
        if it == max_iter:
            break
        try:
            d = -np.linalg.solve(hessian(x), g)
        except np.linalg.LinAlgError:
            d = -g
        slope = float(g @ d)
        if not slope < 0:
            d, slope = -g, -gnorm * gnorm
        step = 1.0
        slack = 4.0 * np.finfo(float).eps * abs(f)
        while True:
            fn, gn = fg(x + step * d)
            if gn is not None and fn <= f + c1 * step * slope + slack:
                break
            step *= shrink
            if step < 1e-20:
                raise MaxEntConvergenceError(
                    f"line search failed after {it} iterations (gradient norm {gnorm:.3g})", x, gnorm, it)
        x, f, g = x + step * d, fn, gn
    raise MaxEntConvergenceError(
        f"no convergence within {max_iter} iterations (gradient norm {gnorm:.3g})", x, gnorm, max_iter)


def _boundary_step(x, d) -> float:
    # stay strictly inside: the leading multiplier must remain positive
    if d[-1] < 0 and x[-1] > 0:
        return 0.99 * x[-1] / -d[-1]
    return math.inf


def _default_start(M: int) -> np.ndarray:
    lam = np.zeros(M)
    if M >= 2:
        lam[1] = 1.0 / math.sqrt(2.0)
    else:
        lam[0] = 1.0
    if M >= 3:
        # zero would sit on the integrability boundary of the top multiplier
        lam[-1] = _TOP_START
    return lam


def _solve_numeric(c: MomentConstraints, options: MaxEntOptions, start=None,
                   upper: float | None = None) -> MaxEntSolution:
    """BFGS on the dual from ``start`` (padded with zeros to the order of ``c``).

    A finite ``upper`` (standardized) cuts the half-line off there; every
    multiplier vector is then integrable.

    A start taken from the optimum one order lower has every gradient entry
    but the last equal to zero. Because the dual is convex, a non-negative
    last entry there means the infimum sits on the boundary where the new
    leading multiplier vanishes, so no density of full degree exists.
    """
    y, tr = precondition(c)
    M = c.order
    if c.support == FULL_LINE and M % 2:
        raise InfeasibleMomentsError("an odd number of moments on the whole line has no maximum-entropy density")
    targets = hermite_basis(M) @ y
    lower = -math.inf if c.support == FULL_LINE else -tr.shift / tr.scale
    support = c.support if upper is None else _BOUNDED
    if start is None:
        lam = _default_start(M)
    else:
        lam = np.zeros(M)
        lam[: len(start)] = start
        if len(start) < M - 1 or not _integrable(lam, support):
            lam[-1] = _TOP_START
    nodes = options.nodes
    total_iter = 0
    prev_lnz = None
    while True:
        rule = build_rule(nodes, lower=lower, upper=upper)
        Phi = _basis_values(rule.nodes, M)

        def fg(l, rule=rule, Phi=Phi):
            return dual_and_gradient(l, targets, rule, support, Phi)

        if upper is None and total_iter == 0 and lam[-1] == 0.0:
            _, g0 = fg(lam)
            if (g0 is not None and g0[-1] > 0.0 and np.linalg.norm(g0) > options.tol
                    and np.linalg.norm(g0[:-1]) <= 10 * options.tol):
                raise InfeasibleMomentsError(
                    f"no maximum-entropy density of degree {M} matches these moments: the "
                    f"order-{M - 1} solution already minimizes the dual over integrable "
                    f"multipliers (boundary derivative {g0[-1]:.3g})"
                )
        def hess(l, rule=rule, Phi=Phi):
            return dual_hessian(l, rule, Phi)

        try:
            if upper is None:
                lam, psi, grad, iters = _bfgs(fg, lam, options.tol, options.max_iter - total_iter,
                                              _boundary_step, hess)
            else:
                lam, psi, grad, iters = _newton(fg, hess, lam, options.tol, options.max_iter - total_iter)
        except MaxEntConvergenceError as exc:
            top = exc.lambdas[-1] if exc.lambdas is not None else math.nan
            if upper is None and abs(top) < 1e-8 * max(1.0, float(np.max(np.abs(exc.lambdas)))):
                raise InfeasibleMomentsError(
                    f"the search for a degree-{M} density ran into the integrability boundary "
                    f"(leading multiplier {top:.3g}, gradient norm {exc.grad_norm:.3g}); the moments "
                    "are most likely outside the range of maximum-entropy densities"
                ) from exc
            total_iter += exc.iterations
            if nodes * 2 <= options.max_nodes and total_iter < options.max_iter:
                # a coarse rule can stall the search on sharply peaked densities
                log.debug("BFGS stalled with %d nodes; refining", nodes)
                nodes *= 2
                prev_lnz = None
                continue
            raise MaxEntConvergenceError(str(exc), exc.lambdas, exc.grad_norm, total_iter) from exc
        total_iter += iters
        lnz = psi - float(lam @ targets[1:])
        if prev_lnz is None:
            # check the rule itself: refine once and compare ln Z at the optimum
            prev_lnz = lnz
            if nodes * 2 > options.max_nodes:
                break
            nodes *= 2
            continue
        if abs(lnz - prev_lnz) < options.lnz_tol or nodes * 2 > options.max_nodes:
            break
        prev_lnz = lnz
        nodes *= 2
    return MaxEntSolution(lam, lnz, tr, c.support, float(np.linalg.norm(grad)), total_iter,
                          nodes, "bfgs" if upper is None else "newton-bounded", False, c.moments,
                          math.inf if upper is None else float(upper))


def _solve_chain(c: MomentConstraints, options: MaxEntOptions, upper: float | None = None) -> MaxEntSolution:
    """Solve orders 2, 3, ..., M in turn, each warm-started from the last success."""
    start = None
    for m in range(2, c.order):
        sub = MomentConstraints(c.moments[: m + 1], c.support)
        try:
            if m == 2:
                sol = analytic_maxent(sub, options)
            else:
                sol = _solve_numeric(sub, options, start, upper)
        except MaxEntError:
            start = None
            continue
        start = sol.lambdas
    return _solve_numeric(c, options, start, upper)


def _project(c: MomentConstraints) -> MomentConstraints:
    mu = list(c.moments)
    mu[2] = mu[1] ** 2 * (1.0 + 1e-9)
    return MomentConstraints(tuple(mu), c.support)


def solve_dual(c: MomentConstraints, options: MaxEntOptions | None = None) -> MaxEntSolution:
    """Maximum-entropy density matching ``c``.

    One or two moments use closed forms unless ``options.force_numeric``;
    higher orders are solved by BFGS, warm-started from the lower orders.
    Moments with non-positive variance are projected to
    ``mu_2 = mu_1^2 (1 + 1e-9)`` once and the result is flagged ``projected``.

    On the half-line, moments of order three and up may have no
    maximum-entropy density (the entropy supremum is approached but not
    attained). With ``options.bounded_fallback`` the problem is then re-solved
    on ``[0, mean + edge * sd]``, ``edge = options.fallback_edge()``, which
    always has a solution for interior moments; the result has
    ``bounded=True`` and a ``RuntimeWarning`` is issued.
    """
    options = options or MaxEntOptions()
    projected = False
    if not c.realizable():
        warnings.warn(f"unrealizable moments (variance {c.variance!r}); projecting", RuntimeWarning,
                      stacklevel=2)
        c = _project(c)
        projected = True
    if c.order <= 2 and not options.force_numeric:
        sol = analytic_maxent(c, options)
    elif c.order <= 2:
        sol = _solve_numeric(c, options)
    else:
        margin = c.hankel_margin()
        if margin < -1e-12:
            raise InfeasibleMomentsError(
                f"the moments are not those of any distribution on the support "
                f"(Hankel matrix eigenvalue ratio {margin:.3g} < 0)"
            )
        try:
            sol = _solve_chain(c, options)
        except MaxEntError as exc:
            if c.support != HALF_LINE or not options.bounded_fallback:
                raise
            edge = options.fallback_edge()
            log.info("no half-line solution (%s); refitting on [0, mean + %g sd]", exc, edge)
            try:
                sol = _solve_chain(c, options, upper=edge)
            except MaxEntError as exc2:
                raise exc2 from exc
            warnings.warn(
                f"no maximum-entropy density on [0, inf) matches these moments ({exc}); "
                f"fitted on the bounded support [0, mean + {edge:g} sd] instead",
                RuntimeWarning, stacklevel=2,
            )
    sol.projected = projected
    return sol


# ---------------------------------------------------------------------------
# discretization


def _bin_edges(points, step):
    half = step / 2.0
    a = points - half
    b = points + half
    scale = np.ones(points.shape[0])
    zero = points == 0
    a[zero] = 0.0
    scale[zero] = 2.0
    a = np.maximum(a, 0.0)
    return a, b, scale


def discretize(sol: MaxEntSolution, step: int = 1, offset: int = 0, cap: float | None = None,
               mass_tol: float = 1e-12, frame: str = "original",
               normalize: bool = True) -> dict[int, float]:
    """Probabilities of the lattice ``offset, offset + step, ...`` from the density.

    Each point gets the density integrated over ``[x - step/2, x + step/2]``;
    the bin at zero covers ``[0, step/2]`` and is doubled. Bins are emitted
    until the accumulated mass reaches ``1 - mass_tol`` or the count passes
    ``cap`` (default ``100 * mean + 1000``), then renormalized unless
    ``normalize=False`` (the doubled zero bin makes raw bins sum above one).

    ``frame="standardized"`` integrates the standardized density over the
    mapped bins instead; both give the same result up to rounding.
    """
    if step not in (1, 2):
        raise ValueError("lattice step must be 1 or 2")
    if not 0 <= offset < step:
        raise ValueError("lattice offset must lie in [0, step)")
    if sol.support != HALF_LINE:
        raise ValueError("discretization needs a half-line solution")
    mean = sol.moments[1] if len(sol.moments) > 1 else sol.transform.shift
    cap = 100.0 * abs(mean) + 1000.0 if cap is None else cap
    t, w = _gauss_legendre(_GL_POINTS)
    tr = sol.transform
    probs: list[np.ndarray] = []
    counts: list[np.ndarray] = []
    mass = 0.0
    start = offset
    chunk = 2048
    while start <= cap:
        pts = np.arange(start, start + chunk * step, step, dtype=np.int64)
        pts = pts[pts <= cap]
        a, b, scale = _bin_edges(pts.astype(float), step)
        if frame == "standardized":
            a, b = tr.to_standard(a), tr.to_standard(b)
            f = sol.density_standard
        else:
            f = sol.density
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        x = mid[:, None] + half[:, None] * t[None, :]
        vals = f(x.ravel()).reshape(x.shape)
        p = scale * half * (vals @ w)
        counts.append(pts)
        probs.append(p)
        # stop once the bulk is behind us and the remaining mass is negligible
        done = False
        for k in range(p.shape[0]):
            mass += p[k]
            if mass >= 1.0 - mass_tol:
                counts[-1] = pts[: k + 1]
                probs[-1] = p[: k + 1]
                done = True
                break
        if done:
            break
        start = int(pts[-1]) + step if pts.size else cap + 1
    c = np.concatenate(counts) if counts else np.zeros(0, dtype=np.int64)
    p = np.concatenate(probs) if probs else np.zeros(0)
    total = math.fsum(p)
    if not total > 0:
        raise MaxEntError("reconstructed density has no mass on the lattice")
    if normalize:
        p = p / total
    return {int(k): float(v) for k, v in zip(c, p) if v > 0}


def reconstruct(moments, support: str = HALF_LINE, step: int = 1, offset: int = 0,
                options: MaxEntOptions | None = None):
    """Solve for the density and discretize it; returns ``(solution, distribution)``."""
    c = moments if isinstance(moments, MomentConstraints) else MomentConstraints(tuple(moments), support)
    sol = solve_dual(c, options)
    return sol, discretize(sol, step, offset)


# ---------------------------------------------------------------------------
# CSV dump


def write_reconstruction_csv(sol: MaxEntSolution, dist: dict, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write(f"# {sol.summary()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["count", "probability"])
        for k in sorted(dist):
            w.writerow([k, repr(float(dist[k]))])
    finally:
        if own:
            fh.close()


def read_reconstruction_csv(path_or_buf) -> dict[int, float]:
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, newline="") as fh:
            text = fh.read()
    else:
        text = path_or_buf.read()
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    reader = csv.reader(io.StringIO("\n".join(rows)))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["count", "probability"]:
        raise ValueError("expected a 'count,probability' header")
    return {int(r[0]): float(r[1]) for r in reader}
