"""Entropic optimal transport between uniformly weighted point clouds.

The solver works on dual potentials ``f`` and ``g`` held in log space. Inner
iterations run as matrix-vector scalings against a kernel that has the
current potentials absorbed into it, so every stored kernel entry is the
current coupling rather than ``exp(-C / eps)``. Scalings are folded back
into the potentials whenever they drift away from one, and a log-domain
update is used whenever a scaling would divide by an underflowed sum.

The regularized objective is ``<P, C> - eps * H(P)`` with
``H(P) = -sum P log P``.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from ._validation import check_points, check_positive, check_same_width
from .exceptions import NumericalError

DEFAULT_EPSILON = 0.1
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 2000

# scalings outside [e^-25, e^25] are absorbed into the potentials
_ABSORB_LOG_BOUND = 25.0
# eps annealing: halve from max(C) while above 4x the target
_ANNEAL_FACTOR = 0.5
_ANNEAL_RATIO = 4.0
_ANNEAL_SWEEPS = 2
_TARGET_SWEEPS = 3


@dataclass(frozen=True)
class DiscreteMeasure:
    """Uniform empirical measure ``(1/n) sum_i delta_{x_i}``."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", check_points(self.points, "points"))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def weights(self):
        return np.full(self.n, 1.0 / self.n)


def _as_points(measure, name):
    if isinstance(measure, DiscreteMeasure):
        return measure.points
    return check_points(measure, name)


@dataclass(frozen=True)
class SinkhornSolution:
    f: np.ndarray
    g: np.ndarray
    log_coupling: np.ndarray
    transport_cost: float
    entropic_cost: float
    iterations: int
    marginal_error: float
    converged: bool
    epsilon: float

    @property
    def coupling(self):
        return np.exp(self.log_coupling)


def cost_matrix(X, Y):
    """Squared Euclidean cost ``C_ij = ||x_i - y_j||^2``."""
    X = _as_points(X, "X")
    Y = _as_points(Y, "Y")
    check_same_width(X, Y)
    return cdist(X, Y, metric="sqeuclidean")


def sinkhorn(mu, nu, epsilon=DEFAULT_EPSILON, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    """Solve entropic OT between two uniform point clouds.

    Parameters
    ----------
    mu, nu : DiscreteMeasure or array-like of shape (n, d) / (m, d)
    epsilon : float
        Entropic regularization strength, in the units of the cost.
    max_iter : int
        Maximum number of full (row, column) scaling sweeps.
    tol : float
        Stop once the largest absolute marginal violation is ``<= tol``.

    Returns
    -------
    SinkhornSolution
        ``converged`` is False when ``max_iter`` was exhausted; the
        solution is still returned so callers can decide what to do.
    """
    X = _as_points(mu, "mu")
    Y = _as_points(nu, "nu")
    epsilon = check_positive(epsilon, "epsilon")
    C = cost_matrix(X, Y)
    if not np.all(np.isfinite(C)):
        raise NumericalError("cost matrix contains non-finite entries")
    return _solve(C, epsilon, int(max_iter), float(tol))


def _solve(C, eps, max_iter, tol):
    n, m = C.shape
    # potentials f, g in cost units; anneal eps down from the cost range
    f = np.zeros(n)
    g = np.zeros(m)
    it = 0
    for stage_eps, sweeps in _eps_schedule(C, eps):
        # simultaneous averaged updates; alternating sweeps stall on warm starts
        for _ in range(sweeps):
            f_new = -stage_eps * (logsumexp((g[None, :] - C) / stage_eps, axis=1) - math.log(m))
            g_new = -stage_eps * (logsumexp((f[:, None] - C) / stage_eps, axis=0) - math.log(n))
            f = 0.5 * (f + f_new)
            g = 0.5 * (g + g_new)
            it += 1
    f, g, converged, err, used = _scaling_sweeps(C, eps, f, g, max_iter, tol)
    it += used

    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NumericalError("Sinkhorn potentials became non-finite")
    a, b = 1.0 / n, 1.0 / m
    log_P = (f[:, None] + g[None, :] - C) / eps - math.log(n) - math.log(m)
    P = np.exp(log_P)
    marginal_error = max(
        float(np.max(np.abs(P.sum(axis=1) - a))),
        float(np.max(np.abs(P.sum(axis=0) - b))),
    )
    transport = float(np.sum(P * C))
    neg_entropy = float(np.sum(P * log_P))
    return SinkhornSolution(
        f=f,
        g=g,
        log_coupling=log_P,
        transport_cost=transport,
        entropic_cost=transport + eps * neg_entropy,
        iterations=it,
        marginal_error=marginal_error,
        # slack covers rounding when re-exponentiating the stored log coupling
        converged=converged and marginal_error <= tol + 64 * np.finfo(float).eps * max(a, b),
        epsilon=eps,
    )


def _eps_schedule(C, eps):
    """``(eps, sweeps)`` warm-up stages, halving from ``max(C)`` to ``eps``."""
    stages = []
    current = float(np.max(C))
    while current > _ANNEAL_RATIO * eps:
        stages.append((current, _ANNEAL_SWEEPS))
        current *= _ANNEAL_FACTOR
    stages.append((eps, _TARGET_SWEEPS))
    return stages


def _scaling_sweeps(C, eps, f, g, max_iter, tol):
    """Run scaling sweeps from potentials ``(f, g)`` at a fixed ``eps``.

    Returns ``(f, g, converged, marginal_error, sweeps_used)``.
    """
    n, m = C.shape
    a, b = 1.0 / n, 1.0 / m
    log_ab = -math.log(n) - math.log(m)
    scaled = -C / eps
    alpha = f / eps
    beta = g / eps

    def log_update():
        nonlocal alpha, beta
        alpha = -logsumexp(scaled + beta[None, :], axis=1) - math.log(m)
        beta = -logsumexp(scaled + alpha[:, None], axis=0) - math.log(n)

    def kernel():
        return np.exp(scaled + alpha[:, None] + beta[None, :] + log_ab)

    def absorb():
        nonlocal alpha, beta
        alpha = alpha + np.log(u)
        beta = beta + np.log(v)
        u[:] = 1.0
        v[:] = 1.0

    log_update()
    K = kernel()
    u = np.ones(n)
    v = np.ones(m)
    err = np.inf
    converged = False
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        while True:
            Kv = K @ v
            err = float(np.max(np.abs(u * Kv - a)))
            if err <= tol:
                converged = True
                break
            if it >= max_iter:
                break
            it += 1
            if not np.all(Kv > 0):
                absorb()
                log_update()
                K = kernel()
                continue
            u = a / Kv
            KTu = K.T @ u
            if not np.all(KTu > 0):
                absorb()
                log_update()
                K = kernel()
                continue
            v = b / KTu
            if (
                np.max(np.abs(np.log(u))) > _ABSORB_LOG_BOUND
                or np.max(np.abs(np.log(v))) > _ABSORB_LOG_BOUND
            ):
                absorb()
                K = kernel()
        absorb()
    return eps * alpha, eps * beta, converged, err, it


def entropic_cost(mu, nu, epsilon=DEFAULT_EPSILON, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    return sinkhorn(mu, nu, epsilon, max_iter, tol).entropic_cost


def _transpose(sol):
    return SinkhornSolution(
        f=sol.g,
        g=sol.f,
        log_coupling=sol.log_coupling.T,
        transport_cost=sol.transport_cost,
        entropic_cost=sol.entropic_cost,
        iterations=sol.iterations,
        marginal_error=sol.marginal_error,
        converged=sol.converged,
        epsilon=sol.epsilon,
    )


def _cross_solve(X, Y, epsilon, max_iter, tol):
    """Solve ``(X, Y)`` in a canonical argument order so swapping is bit-exact."""
    if (Y.shape, Y.tobytes()) < (X.shape, X.tobytes()):
        return _transpose(sinkhorn(Y, X, epsilon, max_iter, tol))
    return sinkhorn(X, Y, epsilon, max_iter, tol)


def sinkhorn_divergence(mu, nu, epsilon=DEFAULT_EPSILON, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    """Debiased divergence ``W(mu, nu) - (W(mu, mu) + W(nu, nu)) / 2``."""
    X = _as_points(mu, "mu")
    Y = _as_points(nu, "nu")
    check_same_width(X, Y, ("mu", "nu"))
    w_xy = _cross_solve(X, Y, epsilon, max_iter, tol).entropic_cost
    w_xx = sinkhorn(X, X, epsilon, max_iter, tol).entropic_cost
    w_yy = sinkhorn(Y, Y, epsilon, max_iter, tol).entropic_cost
    return w_xy - 0.5 * (w_xx + w_yy)


def _require_converged(sol, what):
    if not sol.converged:
        raise NumericalError(
            f"{what}: Sinkhorn did not converge (marginal error "
            f"{sol.marginal_error:.3g} after {sol.iterations} iterations)"
        )


def cost_gradient_first(sol, X, Y):
    """Envelope gradient of ``W(X, Y)`` with respect to the points ``X``."""
    P = sol.coupling
    return 2.0 * (X * P.sum(axis=1)[:, None] - P @ Y)


def cost_gradient_second(sol, X, Y):
    """Envelope gradient of ``W(X, Y)`` with respect to the points ``Y``."""
    P = sol.coupling
    return 2.0 * (Y * P.sum(axis=0)[:, None] - P.T @ X)


def divergence_value_and_gradient(
    mu, nu, epsilon=DEFAULT_EPSILON, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL
):
    """Return ``(divergence, gradient wrt mu's points)`` sharing the three solves."""
    X = _as_points(mu, "mu")
    Y = _as_points(nu, "nu")
    check_same_width(X, Y, ("mu", "nu"))
    s_xy = _cross_solve(X, Y, epsilon, max_iter, tol)
    s_xx = sinkhorn(X, X, epsilon, max_iter, tol)
    s_yy = sinkhorn(Y, Y, epsilon, max_iter, tol)
    _require_converged(s_xy, "W(mu, nu)")
    _require_converged(s_xx, "W(mu, mu)")
    value = s_xy.entropic_cost - 0.5 * (s_xx.entropic_cost + s_yy.entropic_cost)
    # W(mu, mu) moves through both arguments
    grad_self = cost_gradient_first(s_xx, X, X) + cost_gradient_second(s_xx, X, X)
    grad = cost_gradient_first(s_xy, X, Y) - 0.5 * grad_self
    return value, grad


def divergence_gradient(mu, nu, epsilon=DEFAULT_EPSILON, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    """Gradient of :func:`sinkhorn_divergence` with respect to ``mu``'s points.

    Raises :class:`NumericalError` if a solve needed for the gradient did
    not converge.
    """
    return divergence_value_and_gradient(mu, nu, epsilon, max_iter, tol)[1]


def exact_ot_oracle(mu, nu):
    """Unregularized OT cost by enumerating all assignments (n = m <= 8)."""
    X = _as_points(mu, "mu")
    Y = _as_points(nu, "nu")
    check_same_width(X, Y, ("mu", "nu"))
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ValueError("exact_ot_oracle needs equal sample counts")
    if n > 8:
        raise ValueError("exact_ot_oracle enumerates n! assignments; n must be <= 8")
    C = cost_matrix(X, Y)
    rows = np.arange(n)
    best = min(C[rows, list(perm)].sum() for perm in itertools.permutations(range(n)))
    return float(best) / n
