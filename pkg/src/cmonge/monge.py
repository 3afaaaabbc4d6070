"""Monge gap regularizer and the per-condition training objective.

All gradients are taken with respect to the transported points ``T(x_i)``;
the trainer chains them through the map network.
"""

from dataclasses import dataclass

import numpy as np

from . import ot
from ._validation import check_aligned, check_points, check_same_width


@dataclass(frozen=True)
class LossReport:
    fitting_term: float
    gap_term: float
    total: float
    lambda_: float
    grad_wrt_outputs: np.ndarray


def _gap_solve(source, transported, epsilon, max_iter, tol):
    source = check_points(source, "source_batch")
    transported = check_points(transported, "transported_batch")
    check_aligned(source, transported, ("source_batch", "transported_batch"))
    sol = ot.sinkhorn(source, transported, epsilon, max_iter, tol)
    displacement = float(np.mean(np.sum((source - transported) ** 2, axis=1)))
    return source, transported, sol, displacement


def monge_gap(
    source_batch,
    transported_batch,
    epsilon=ot.DEFAULT_EPSILON,
    max_iter=ot.DEFAULT_MAX_ITER,
    tol=ot.DEFAULT_TOL,
):
    """Mean displacement cost minus ``W_eps(source, transported)``.

    Row ``i`` of ``transported_batch`` must be the image of row ``i`` of
    ``source_batch``. The value is close to zero for cost-optimal maps and
    may dip slightly below zero because of the entropic term; it is not
    clamped.
    """
    _, _, sol, displacement = _gap_solve(source_batch, transported_batch, epsilon, max_iter, tol)
    return displacement - sol.entropic_cost


def _gap_value_and_gradient(source, transported, epsilon, max_iter, tol):
    source, transported, sol, displacement = _gap_solve(
        source, transported, epsilon, max_iter, tol
    )
    ot._require_converged(sol, "monge gap W(source, transported)")
    n = source.shape[0]
    grad = (2.0 / n) * (transported - source) - ot.cost_gradient_second(sol, source, transported)
    return displacement - sol.entropic_cost, grad


def monge_gap_gradient(
    source_batch,
    transported_batch,
    epsilon=ot.DEFAULT_EPSILON,
    max_iter=ot.DEFAULT_MAX_ITER,
    tol=ot.DEFAULT_TOL,
):
    """Gradient of :func:`monge_gap` with respect to ``transported_batch``."""
    return _gap_value_and_gradient(source_batch, transported_batch, epsilon, max_iter, tol)[1]


def conditional_loss_step(
    source_batch,
    transported_batch,
    target_batch,
    epsilon=ot.DEFAULT_EPSILON,
    lambda_=1e-2,
    max_iter=ot.DEFAULT_MAX_ITER,
    tol=ot.DEFAULT_TOL,
):
    """Loss for one condition: ``div(T#mu, nu) + lambda * gap(T)``.

    Returns a :class:`LossReport` whose ``grad_wrt_outputs`` is the
    derivative of the total with respect to ``transported_batch``.
    """
    transported = check_points(transported_batch, "transported_batch")
    target = check_points(target_batch, "target_batch")
    check_same_width(transported, target, ("transported_batch", "target_batch"))
    lambda_ = float(lambda_)
    if lambda_ < 0:
        raise ValueError("lambda_ must be non-negative")

    fit, fit_grad = ot.divergence_value_and_gradient(transported, target, epsilon, max_iter, tol)
    gap, gap_grad = _gap_value_and_gradient(source_batch, transported, epsilon, max_iter, tol)
    return LossReport(
        fitting_term=fit,
        gap_term=gap,
        total=fit + lambda_ * gap,
        lambda_=lambda_,
        grad_wrt_outputs=fit_grad + lambda_ * gap_grad,
    )
