"""Evaluation metrics and the batched evaluation protocol.

Report tables are CSV with a leading ``# cmonge-eval v1`` comment line and
columns ``model,condition,dose,batch,r2,wasserstein,mmd``. Per-batch rows
carry the batch index; the summary row of a condition has batch ``mean``
and is followed by a ``std`` row.
"""

import csv
import io
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import ot
from ._validation import check_points, check_same_width
from .conditioning import CONTROL
from .exceptions import DataError

REPORT_SCHEMA = "# cmonge-eval v1"
REPORT_COLUMNS = ["model", "condition", "dose", "batch", "r2", "wasserstein", "mmd"]
BANDWIDTH_FACTORS = (0.5, 1.0, 2.0)


def _subset(X, feature_subset):
    if feature_subset is None:
        return X
    idx = np.asarray(feature_subset, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= X.shape[1]:
        raise ValueError(f"feature_subset indices must lie in [0, {X.shape[1]})")
    return X[:, idx]


def r_squared_means(pred, target, feature_subset=None):
    """``1 - SS_res / SS_tot`` of predicted against true feature means.

    Returns NaN when the target means are constant (see :func:`r2_is_defined`).
    """
    pred = check_points(pred, "pred")
    target = check_points(target, "target")
    check_same_width(pred, target, ("pred", "target"))
    mp = _subset(pred, feature_subset).mean(axis=0)
    mt = _subset(target, feature_subset).mean(axis=0)
    ss_tot = float(np.sum((mt - mt.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((mt - mp) ** 2)) / ss_tot


def r2_is_defined(value):
    return not math.isnan(value)


def median_bandwidths(a, b, factors=BANDWIDTH_FACTORS):
    """Median pairwise distance of the pooled sample times each factor."""
    med = float(np.median(pdist(np.vstack([a, b]))))
    if med == 0.0:
        med = 1.0
    return [f * med for f in factors]


def mmd(a, b, bandwidths=None, clip=True):
    """Unbiased MMD^2 with a Gaussian kernel, averaged over ``bandwidths``.

    ``k(x, y) = exp(-||x - y||^2 / (2 h^2))``. Bandwidths default to the
    multi-scale median heuristic. Negative estimates are clipped to 0 unless
    ``clip`` is false.
    """
    a = check_points(a, "a")
    b = check_points(b, "b")
    check_same_width(a, b, ("a", "b"))
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise ValueError("unbiased MMD needs at least two points per cloud")
    if bandwidths is None:
        bandwidths = median_bandwidths(a, b)
    d_aa = cdist(a, a, "sqeuclidean")
    d_bb = cdist(b, b, "sqeuclidean")
    d_ab = cdist(a, b, "sqeuclidean")
    values = []
    for h in bandwidths:
        g = -1.0 / (2.0 * float(h) ** 2)
        k_aa = np.exp(g * d_aa)
        k_bb = np.exp(g * d_bb)
        k_ab = np.exp(g * d_ab)
        term_aa = (k_aa.sum() - np.trace(k_aa)) / (n * (n - 1))
        term_bb = (k_bb.sum() - np.trace(k_bb)) / (m * (m - 1))
        values.append(term_aa + term_bb - 2.0 * k_ab.mean())
    value = float(np.mean(values))
    return max(value, 0.0) if clip else value


def wasserstein_metric(a, b, epsilon=ot.DEFAULT_EPSILON, max_iter=ot.DEFAULT_MAX_ITER, tol=ot.DEFAULT_TOL):
    """Transport cost ``<P, C>`` of the entropic coupling (not debiased).

    For ``a == b`` the value is at most ``epsilon * log(n)`` above zero.
    """
    return ot.sinkhorn(a, b, epsilon, max_iter, tol).transport_cost


@dataclass
class EvalConfig:
    n_batches: int = 10
    batch_size: int = 256
    epsilon: float = ot.DEFAULT_EPSILON
    feature_subset: list = None
    seed: int = 0
    split: str = "test"


@dataclass
class EvalReport:
    condition: str
    dose: float
    model: str
    batch_r2: list = field(default_factory=list)
    batch_wasserstein: list = field(default_factory=list)
    batch_mmd: list = field(default_factory=list)

    @property
    def n_batches(self):
        return len(self.batch_r2)

    @property
    def r2(self):
        return float(np.mean(self.batch_r2))

    @property
    def wasserstein(self):
        return float(np.mean(self.batch_wasserstein))

    @property
    def mmd(self):
        return float(np.mean(self.batch_mmd))

    @property
    def r2_defined(self):
        return r2_is_defined(self.r2)


def _draw(pool, size, rng):
    if pool.size <= size:
        return pool
    return np.sort(rng.choice(pool, size=size, replace=False))


def evaluate_condition(predict_fn, dataset, plan, label, config=None, model_name="model"):
    """Batched evaluation of one condition on held-out cells.

    ``predict_fn(cells, condition)`` maps control cells to predicted treated
    cells; ``None`` selects the identity baseline. Each batch draws up to
    ``batch_size`` control and target cells without replacement.
    """
    config = config or EvalConfig()
    lists = {"test": plan.test, "train": plan.train}[config.split]
    src_pool = np.asarray(lists.get(CONTROL, []), dtype=np.int64)
    tgt_pool = np.asarray(lists.get(label, []), dtype=np.int64)
    if src_pool.size < 2 or tgt_pool.size < 2:
        raise DataError(f"{config.split} split too small to evaluate {label!r}")
    cond = dataset.condition(label)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), _label_key(label)]))
    report = EvalReport(label, cond.dose, model_name)
    for _ in range(int(config.n_batches)):
        src = dataset.X[_draw(src_pool, config.batch_size, rng)]
        tgt = dataset.X[_draw(tgt_pool, config.batch_size, rng)]
        pred = src if predict_fn is None else predict_fn(src, cond)
        p = _subset(pred, config.feature_subset)
        t = _subset(tgt, config.feature_subset)
        report.batch_r2.append(r_squared_means(p, t))
        report.batch_wasserstein.append(wasserstein_metric(p, t, config.epsilon))
        report.batch_mmd.append(mmd(p, t))
    return report


def _label_key(label):
    """Stable integer derived from a label, so each condition gets its own stream."""
    return zlib.crc32(label.encode("utf-8"))


def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def report_table(reports):
    """Per-batch rows plus ``mean`` and ``std`` summary rows per condition."""
    buf = io.StringIO()
    buf.write(REPORT_SCHEMA + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for rep in reports:
        dose = "" if rep.dose is None else _fmt(rep.dose)
        for i, vals in enumerate(zip(rep.batch_r2, rep.batch_wasserstein, rep.batch_mmd)):
            writer.writerow([rep.model, rep.condition, dose, i, *map(_fmt, vals)])
        writer.writerow([rep.model, rep.condition, dose, "mean", _fmt(rep.r2), _fmt(rep.wasserstein), _fmt(rep.mmd)])
        stds = [float(np.std(v)) for v in (rep.batch_r2, rep.batch_wasserstein, rep.batch_mmd)]
        writer.writerow([rep.model, rep.condition, dose, "std", *map(_fmt, stds)])
    return buf.getvalue()


def long_table(reports):
    """Plot-ready ``model,condition,dose,metric,value`` rows of the condition means."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "condition", "dose", "metric", "value"])
    for rep in reports:
        dose = "" if rep.dose is None else _fmt(rep.dose)
        for metric in ("r2", "wasserstein", "mmd"):
            writer.writerow([rep.model, rep.condition, dose, metric, _fmt(getattr(rep, metric))])
    return buf.getvalue()


def summary_text(reports):
    """Human-readable table, plus per-dose mean and std across conditions."""
    lines = [f"{'model':<10} {'condition':<24} {'r2':>9} {'wasserstein':>12} {'mmd':>10}"]
    for rep in reports:
        flag = "" if rep.r2_defined else "  (r2 undefined)"
        lines.append(f"{rep.model:<10} {rep.condition:<24} {rep.r2:>9.4f} {rep.wasserstein:>12.4f} {rep.mmd:>10.5f}{flag}")
    by_dose = {}
    for rep in reports:
        by_dose.setdefault((rep.model, rep.dose), []).append(rep)
    if by_dose:
        lines.append("")
        lines.append("per dose (mean +- std over conditions)")
        for (model, dose), reps in sorted(by_dose.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0.0)):
            r2 = np.array([r.r2 for r in reps])
            mm = np.array([r.mmd for r in reps])
            lines.append(
                f"{model:<10} dose={'-' if dose is None else _fmt(dose):<10} "
                f"r2 {np.mean(r2):.4f} +- {np.std(r2):.4f}   mmd {np.mean(mm):.5f} +- {np.std(mm):.5f}"
            )
    return "\n".join(lines) + "\n"
