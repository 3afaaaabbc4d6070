"""Condition encoding: dose transform, drug encoders, set pooling and MoA embeddings.

A condition label is canonicalized as ``drug[+drug...][-dose]`` with
lowercase drug names sorted inside combinations, e.g. ``"a+b-1000"``.
The reserved label ``"control"`` marks untreated cells.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import ot
from ._validation import check_is_fitted
from .exceptions import DataError, NumericalError
from .nn import init_params, mlp_backward, mlp_forward

CONTROL = "control"
CONTEXT_MODES = ("none", "dose", "drug_dose")


def format_dose(dose):
    dose = float(dose)
    if dose.is_integer():
        return str(int(dose))
    return f"{dose:.15g}"


def _parse_dose(text):
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


@dataclass(frozen=True)
class RawCondition:
    drug_ids: tuple
    dose: float = None

    def __post_init__(self):
        drugs = tuple(sorted(str(d).strip().lower() for d in self.drug_ids))
        if not drugs or any(not d for d in drugs):
            raise DataError("a condition needs at least one non-empty drug id")
        if any("+" in d for d in drugs):
            raise DataError(f"drug ids may not contain '+': {drugs}")
        object.__setattr__(self, "drug_ids", drugs)
        if self.dose is not None:
            dose = float(self.dose)
            if not math.isfinite(dose) or dose <= 0:
                raise DataError(f"dose must be positive, got {self.dose}")
            object.__setattr__(self, "dose", dose)

    @property
    def label(self):
        base = "+".join(self.drug_ids)
        return base if self.dose is None else f"{base}-{format_dose(self.dose)}"

    @classmethod
    def from_label(cls, label):
        text = str(label).strip().lower()
        if text == CONTROL:
            raise DataError("'control' is not a treatment condition")
        dose = None
        head, sep, tail = text.rpartition("-")
        if sep and head and _parse_dose(tail) is not None:
            text, dose = head, _parse_dose(tail)
        return cls(tuple(text.split("+")), dose)


def canonical_label(label):
    """Canonical form of a label; idempotent."""
    text = str(label).strip().lower()
    if text == CONTROL:
        return CONTROL
    return RawCondition.from_label(text).label


def encode_dose(dose):
    """Natural log of a positive dose."""
    dose = float(dose)
    if not math.isfinite(dose) or dose <= 0:
        raise ValueError(f"dose must be positive, got {dose}")
    return math.log(dose)


@dataclass
class DrugEmbeddingTable:
    """Maps drug ids (or condition labels, for MoA) to vectors of equal length."""

    vectors: dict
    source: str = "fingerprint"

    def __post_init__(self):
        if self.source not in ("fingerprint", "moa"):
            raise DataError(f"unknown embedding source {self.source!r}")
        vecs = {}
        dims = set()
        for key, vec in self.vectors.items():
            arr = np.asarray(vec, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"embedding for {key!r} has non-finite entries")
            vecs[str(key).strip().lower()] = arr
            dims.add(arr.size)
        if len(dims) > 1:
            raise DataError(f"embedding vectors have inconsistent lengths {sorted(dims)}")
        if not vecs:
            raise DataError("empty embedding table")
        self.vectors = vecs

    @property
    def dim(self):
        return next(iter(self.vectors.values())).size

    def lookup(self, drug, dose=None):
        """Vector for ``drug``, preferring the ``drug-dose`` entry when present."""
        if dose is not None:
            key = RawCondition((drug,), dose).label
            if key in self.vectors:
                return self.vectors[key]
        return self.vectors.get(drug)

    def resolve(self, cond):
        """Embeddings of every drug in ``cond``.

        MoA tables may lack some drugs of a combination; those are skipped.
        A condition where nothing resolves is an error.
        """
        found, missing = [], []
        for drug in cond.drug_ids:
            vec = self.lookup(drug, cond.dose)
            (missing if vec is None else found).append(drug if vec is None else vec)
        if missing and (self.source != "moa" or not found):
            raise DataError(f"no {self.source} embedding for {', '.join(missing)} in {cond.label!r}")
        return found


def save_embedding_table(path, table):
    """Write ``drug,<source>_1..<source>_m`` CSV; the header encodes source and m."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["drug"] + [f"{table.source}_{i + 1}" for i in range(table.dim)])
        for key in sorted(table.vectors):
            writer.writerow([key] + [repr(float(v)) for v in table.vectors[key]])


def load_embedding_table(path):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty embedding file")
    header = rows[0]
    if len(header) < 2 or header[0] != "drug":
        raise DataError(f"{path}: header must start with 'drug' followed by <source>_<i> columns")
    sources = {h.rsplit("_", 1)[0] for h in header[1:]}
    if len(sources) != 1:
        raise DataError(f"{path}: mixed embedding sources in header {sorted(sources)}")
    m = len(header) - 1
    vectors = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != m + 1:
            raise DataError(f"{path}:{lineno}: expected {m + 1} columns, found {len(row)}")
        try:
            vectors[row[0]] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return DrugEmbeddingTable(vectors, source=sources.pop())


def _canonical_rows(H):
    """Rows of ``H`` in lexicographic order, making set reductions order-free."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    return H[np.lexsort(H.T[::-1])]


def pool_drug_embeddings(embeddings, encoder):
    """Shared dense encoder applied to each drug, then averaged (DeepSets)."""
    if len(embeddings) == 0:
        raise ValueError("cannot pool an empty list of embeddings")
    H = _canonical_rows(np.vstack([np.asarray(h, dtype=np.float64).reshape(1, -1) for h in embeddings]))
    out, _ = mlp_forward(encoder, H)
    return out.mean(axis=0)


def init_context_encoders(embed_dim, drug_dim, seed):
    """Single dense layers ``W_drug: m -> phi0`` and ``W_dose: m + 1 -> 1``."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    seeds = seed.spawn(2)
    return init_params([embed_dim, drug_dim], seeds[0]), init_params([embed_dim + 1, 1], seeds[1])


def context_width(mode, drug_dim=0):
    if mode not in CONTEXT_MODES:
        raise ValueError(f"context_mode must be one of {CONTEXT_MODES}, got {mode!r}")
    return {"none": 0, "dose": 1, "drug_dose": drug_dim + 1}[mode]


@dataclass
class ConditionContext:
    z_drug: np.ndarray
    z_dose: np.ndarray
    c: np.ndarray


@dataclass
class _ContextTape:
    drug_tape: object = None
    dose_tape: object = None
    n_drugs: int = 0


def context_forward(cond, mode, table=None, w_drug=None, w_dose=None):
    """Build the context vector; returns ``(ConditionContext, tape)``."""
    if mode == "none":
        empty = np.zeros(0)
        return ConditionContext(empty, empty, empty), _ContextTape()
    if cond is None or cond.dose is None:
        raise DataError(f"context mode {mode!r} needs a dose")
    s = encode_dose(cond.dose)
    if mode == "dose":
        c = np.array([s])
        return ConditionContext(np.zeros(0), c.copy(), c), _ContextTape()
    if mode != "drug_dose":
        raise ValueError(f"unknown context mode {mode!r}")
    if table is None or w_drug is None or w_dose is None:
        raise ValueError("drug_dose context needs an embedding table and both encoders")
    H = _canonical_rows(np.vstack(table.resolve(cond)))
    drug_out, drug_tape = mlp_forward(w_drug, H)
    z_drug = drug_out.mean(axis=0)
    h_mean = H.mean(axis=0)
    dose_out, dose_tape = mlp_forward(w_dose, np.append(h_mean, s)[None, :])
    z_dose = dose_out[0]
    ctx = ConditionContext(z_drug, z_dose, np.concatenate([z_drug, z_dose]))
    return ctx, _ContextTape(drug_tape, dose_tape, H.shape[0])


def context_backward(tape, grad_c, w_drug, w_dose):
    """Gradients of ``<grad_c, c>`` for the drug and dose encoders."""
    phi0 = w_drug.out_dim
    g_drug = np.tile(np.asarray(grad_c[:phi0]) / tape.n_drugs, (tape.n_drugs, 1))
    grad_drug, _ = mlp_backward(w_drug, tape.drug_tape, g_drug)
    grad_dose, _ = mlp_backward(w_dose, tape.dose_tape, np.asarray(grad_c[phi0:]).reshape(1, -1))
    return grad_drug, grad_dose


def encode_condition(cond, table, w_drug, w_dose, mode="drug_dose"):
    """Context ``c = (z_drug, z_dose)``; ``(log dose,)`` in dose mode."""
    return context_forward(cond, mode, table, w_drug, w_dose)[0]


def stress(D, X):
    """Raw stress ``sum_{i<j} (D_ij - ||x_i - x_j||)^2``."""
    dist = np.sqrt(ot.cost_matrix(X, X))
    return 0.5 * float(np.sum((D - dist) ** 2))


class SMACOF(BaseEstimator):
    """Metric MDS by stress majorization on a precomputed dissimilarity matrix.

    ``transform`` places new objects against the fitted configuration, which
    stays fixed; it expects distances from each new object to every fitted
    one.
    """

    def __init__(self, n_components=10, max_iter=500, tol=1e-8, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, D, y=None):
        D = _check_dissimilarity(D)
        n = D.shape[0]
        rng = np.random.default_rng(self.random_state)
        X = rng.normal(size=(n, self.n_components))
        history = [stress(D, X)]
        n_iter = 0
        while n_iter < self.max_iter and history[-1] > 0.0:
            X_new = _guttman_transform(D, X)
            cur = stress(D, X_new)
            if cur > history[-1]:
                break  # rounding noise at a stationary point
            X = X_new
            n_iter += 1
            prev = history[-1]
            history.append(cur)
            if (prev - cur) / prev < self.tol:
                break
        self.embedding_ = X
        self.stress_ = history[-1]
        self.stress_history_ = history
        self.n_iter_ = n_iter
        self.dissimilarity_ = D
        return self

    def fit_transform(self, D, y=None):
        return self.fit(D).embedding_

    def transform(self, D_new):
        check_is_fitted(self, "embedding_")
        D_new = np.atleast_2d(np.asarray(D_new, dtype=np.float64))
        anchors = self.embedding_
        if D_new.shape[1] != anchors.shape[0]:
            raise ValueError(
                f"need distances to all {anchors.shape[0]} fitted points, got {D_new.shape[1]}"
            )
        return np.vstack([_place_point(anchors, row, self.max_iter, self.tol) for row in D_new])


def _check_dissimilarity(D):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] < 2:
        raise ValueError("dissimilarity must be a square matrix with at least two objects")
    if not np.all(np.isfinite(D)) or np.any(D < 0):
        raise ValueError("dissimilarities must be finite and non-negative")
    # solver-level asymmetry is averaged away; anything larger is a caller bug
    if not np.allclose(D, D.T, rtol=0, atol=1e-6 * max(float(D.max()), 1.0)):
        raise ValueError("dissimilarity matrix is not symmetric")
    return 0.5 * (D + D.T)


def _guttman_transform(D, X):
    n = X.shape[0]
    dist = np.sqrt(ot.cost_matrix(X, X))
    with np.errstate(divide="ignore", invalid="ignore"):
        B = np.where(dist > 0, -D / dist, 0.0)
    np.fill_diagonal(B, 0.0)
    np.fill_diagonal(B, -B.sum(axis=1))
    return B @ X / n


def _trilaterate(anchors, d):
    """Least-squares point matching squared distances, lifted off the anchor span."""
    y0 = anchors[0]
    A = 2.0 * (anchors[1:] - y0)
    rhs = np.sum(anchors[1:] ** 2, axis=1) - y0 @ y0 - d[1:] ** 2 + d[0] ** 2
    if A.shape[0] == 0:
        x = y0.copy()
    else:
        x = np.linalg.lstsq(A, rhs, rcond=None)[0]
    height2 = float(np.mean(d**2 - np.sum((anchors - x) ** 2, axis=1)))
    if height2 > 0:
        basis = np.linalg.svd(anchors - y0)[2]
        rank = int(np.sum(np.linalg.svd(anchors - y0, compute_uv=False) > 1e-10))
        if rank < basis.shape[0]:
            x = x + np.sqrt(height2) * basis[rank]
    return x


def _place_point(anchors, d, max_iter, tol):
    """Minimize ``sum_j (d_j - ||x - y_j||)^2`` over ``x`` with anchors fixed."""

    def point_stress(x):
        return float(np.sum((d - np.linalg.norm(anchors - x, axis=1)) ** 2))

    x = _trilaterate(anchors, d)
    prev = point_stress(x)
    for _ in range(max_iter):
        if prev == 0.0:
            break
        diff = x - anchors
        dist = np.linalg.norm(diff, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, d / dist, 0.0)
        x_new = np.mean(anchors + ratio[:, None] * diff, axis=0)
        cur = point_stress(x_new)
        if cur > prev:
            break
        x = x_new
        if prev - cur <= tol * prev:
            break
        prev = cur
    return x


def _points(m):
    return m.points if isinstance(m, ot.DiscreteMeasure) else np.asarray(m, dtype=np.float64)


def _self_costs(pts, names, epsilon, max_iter, tol):
    out = []
    for p, name in zip(pts, names):
        sol = ot.sinkhorn(p, p, epsilon, max_iter, tol)
        if not sol.converged:
            raise NumericalError(f"Sinkhorn failed on pair ({name}, {name})")
        out.append(sol.entropic_cost)
    return out


def _distance(x, y, wx, wy, pair, epsilon, max_iter, tol):
    sol = ot._cross_solve(x, y, epsilon, max_iter, tol)
    if not sol.converged:
        raise NumericalError(f"Sinkhorn failed on pair ({pair[0]}, {pair[1]})")
    return math.sqrt(max(sol.entropic_cost - 0.5 * (wx + wy), 0.0))


def pairwise_wasserstein(measures, epsilon, max_iter=ot.DEFAULT_MAX_ITER, tol=ot.DEFAULT_TOL, names=None):
    """Symmetric matrix of ``sqrt(max(divergence, 0))`` between populations.

    Raises :class:`NumericalError` naming the pair whose solve failed.
    """
    pts = [_points(m) for m in measures]
    names = list(names) if names is not None else [str(i) for i in range(len(pts))]
    w = _self_costs(pts, names, epsilon, max_iter, tol)
    K = len(pts)
    D = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            D[i, j] = D[j, i] = _distance(pts[i], pts[j], w[i], w[j], (names[i], names[j]), epsilon, max_iter, tol)
    return D


def cross_wasserstein(
    measures_a, measures_b, epsilon, max_iter=ot.DEFAULT_MAX_ITER, tol=ot.DEFAULT_TOL, names_a=None, names_b=None
):
    """``len(a) x len(b)`` matrix of the same distance as :func:`pairwise_wasserstein`."""
    pa = [_points(m) for m in measures_a]
    pb = [_points(m) for m in measures_b]
    names_a = list(names_a) if names_a is not None else [f"a{i}" for i in range(len(pa))]
    names_b = list(names_b) if names_b is not None else [f"b{j}" for j in range(len(pb))]
    wa = _self_costs(pa, names_a, epsilon, max_iter, tol)
    wb = _self_costs(pb, names_b, epsilon, max_iter, tol)
    D = np.zeros((len(pa), len(pb)))
    for i in range(len(pa)):
        for j in range(len(pb)):
            D[i, j] = _distance(pa[i], pb[j], wa[i], wb[j], (names_a[i], names_b[j]), epsilon, max_iter, tol)
    return D


def moa_embedding(target_measures, epsilon=ot.DEFAULT_EPSILON, out_dim=10, seed=0, max_iter=ot.DEFAULT_MAX_ITER):
    """MDS coordinates of target populations from their pairwise OT distances.

    Returns a ``(K, out_dim)`` array; row order follows ``target_measures``.
    """
    if len(target_measures) < 2:
        raise ValueError("need at least two populations to embed")
    D = pairwise_wasserstein(target_measures, epsilon, max_iter=max_iter)
    return SMACOF(n_components=out_dim, random_state=seed).fit_transform(D)
