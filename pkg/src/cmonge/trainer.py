"""Training loop for the conditional map and the end-to-end prediction pipeline.

A cell ``x`` under condition ``c`` is predicted as ``D(E(x) + T([E(x), c]))``
where ``E``/``D`` is a frozen autoencoder (or the identity) and ``T`` is the
map network. The context ``c`` comes from :mod:`cmonge.conditioning`.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import ot
from ._validation import check_is_fitted, check_points
from .autoencoder import AutoencoderParams, decode, encode
from .conditioning import (
    CONTROL,
    DrugEmbeddingTable,
    RawCondition,
    context_backward,
    context_forward,
    context_width,
    init_context_encoders,
)
from .data import CellDataset, SplitPlan, sample_indices
from .exceptions import ConfigError, DataError
from .monge import conditional_loss_step
from .nn import AdamWState, MlpParams, adamw_step, init_params, mlp_backward, mlp_forward
from .serialization import load_arrays, mlp_from_arrays, mlp_to_arrays, save_arrays

DEFAULT_HIDDEN = (64, 64, 64, 64)


@dataclass
class MapModel:
    monge_net: MlpParams
    context_mode: str = "none"
    w_drug: MlpParams = None
    w_dose: MlpParams = None
    table: DrugEmbeddingTable = None
    epsilon: float = ot.DEFAULT_EPSILON
    lambda_: float = 1e-2

    def __post_init__(self):
        width = self.context_width
        if self.monge_net.out_dim + width != self.monge_net.in_dim:
            raise ValueError(
                f"map network takes {self.monge_net.in_dim} inputs; expected latent "
                f"{self.monge_net.out_dim} + context {width}"
            )
        if self.context_mode == "drug_dose":
            if self.table is None or self.w_drug is None or self.w_dose is None:
                raise ValueError("drug_dose mode needs an embedding table and both encoders")
            if self.w_drug.in_dim != self.table.dim or self.w_dose.in_dim != self.table.dim + 1:
                raise ValueError("encoder widths do not match the embedding dimension")

    @property
    def latent_dim(self):
        return self.monge_net.out_dim

    @property
    def context_width(self):
        drug_dim = self.w_drug.out_dim if self.w_drug is not None else 0
        return context_width(self.context_mode, drug_dim)

    def trainable(self):
        """Flat parameter list in a fixed order: map network, then encoders."""
        out = self.monge_net.arrays()
        if self.context_mode == "drug_dose":
            out += self.w_drug.arrays() + self.w_dose.arrays()
        return out

    def with_trainable(self, arrays):
        n = 2 * self.monge_net.n_layers
        net = MlpParams.from_arrays(arrays[:n])
        w_drug, w_dose = self.w_drug, self.w_dose
        if self.context_mode == "drug_dose":
            m = 2 * self.w_drug.n_layers
            w_drug = MlpParams.from_arrays(arrays[n : n + m])
            w_dose = MlpParams.from_arrays(arrays[n + m :])
        return MapModel(net, self.context_mode, w_drug, w_dose, self.table, self.epsilon, self.lambda_)


def init_map_model(
    latent_dim,
    context_mode="none",
    hidden=DEFAULT_HIDDEN,
    table=None,
    drug_dim=50,
    epsilon=ot.DEFAULT_EPSILON,
    lambda_=1e-2,
    seed=0,
    zero_output=False,
):
    """Glorot-initialized map; ``zero_output`` zeroes the last layer so ``T = 0``."""
    net_ss, enc_ss = np.random.SeedSequence(seed).spawn(2)
    w_drug = w_dose = None
    if context_mode == "drug_dose":
        if table is None:
            raise ConfigError("drug_dose context needs a drug embedding table")
        w_drug, w_dose = init_context_encoders(table.dim, drug_dim, enc_ss)
    width = context_width(context_mode, w_drug.out_dim if w_drug is not None else 0)
    net = init_params([latent_dim + width, *hidden, latent_dim], net_ss)
    if zero_output:
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
    return MapModel(net, context_mode, w_drug, w_dose, table, float(epsilon), float(lambda_))


def transport_latent(model, Z, cond):
    """``Z + T([Z, c])``."""
    Z = check_points(Z, "Z")
    ctx, _ = context_forward(cond, model.context_mode, model.table, model.w_drug, model.w_dose)
    inputs = np.hstack([Z, np.tile(ctx.c, (Z.shape[0], 1))])
    return Z + mlp_forward(model.monge_net, inputs)[0]


def loss_and_grad(model, Z, Y, cond, max_iter=ot.DEFAULT_MAX_ITER, tol=ot.DEFAULT_TOL):
    """Loss on one batch and its gradient for every trainable array.

    ``Z`` are encoded control cells, ``Y`` encoded target cells. Returns
    ``(LossReport, grads)`` with ``grads`` aligned to ``model.trainable()``.
    """
    ctx, ctx_tape = context_forward(cond, model.context_mode, model.table, model.w_drug, model.w_dose)
    inputs = np.hstack([Z, np.tile(ctx.c, (Z.shape[0], 1))])
    residual, tape = mlp_forward(model.monge_net, inputs)
    T = Z + residual
    report = conditional_loss_step(Z, T, Y, model.epsilon, model.lambda_, max_iter, tol)
    # d(loss)/d(residual) equals d(loss)/dT because T = Z + residual
    net_grads, grad_inputs = mlp_backward(model.monge_net, tape, report.grad_wrt_outputs)
    grads = net_grads.arrays()
    if model.context_mode == "drug_dose":
        grad_c = grad_inputs[:, model.latent_dim :].sum(axis=0)
        g_drug, g_dose = context_backward(ctx_tape, grad_c, model.w_drug, model.w_dose)
        grads += g_drug.arrays() + g_dose.arrays()
    return report, grads


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    sinkhorn_max_iter: int = 5000
    sinkhorn_tol: float = 1e-4


@dataclass(frozen=True)
class TrainRecord:
    step: int
    condition: str
    fitting_term: float
    gap_term: float
    total: float
    elapsed: float


@dataclass
class TrainHistory:
    seed: int
    records: list = field(default_factory=list)

    def totals(self):
        return np.array([r.total for r in self.records])

    def to_csv(self):
        """Deterministic table; wall-clock is kept in memory only so reruns match byte for byte."""
        lines = ["step,condition,fitting_term,gap_term,total"]
        for r in self.records:
            lines.append(f"{r.step},{r.condition},{r.fitting_term!r},{r.gap_term!r},{r.total!r}")
        return "\n".join(lines) + "\n"


def sample_condition(rng, conditions):
    """One condition, uniformly."""
    return conditions[int(rng.integers(len(conditions)))]


def _latent_codes(X, autoencoder):
    return X if autoencoder is None else encode(autoencoder, X)


def train_map(model, dataset, plan, config=None, autoencoder=None, conditions=None, callback=None):
    """Minimize the conditional Monge gap objective; returns ``(model, history)``.

    Each step samples one training condition uniformly, then ``batch_size``
    control and target cells with replacement from the training split.
    """
    config = config or TrainConfig()
    conditions = sorted(conditions if conditions is not None else plan.train_conditions)
    if not conditions:
        raise ConfigError("no training conditions")
    for lab in conditions:
        if len(plan.train.get(lab, [])) == 0:
            raise ConfigError(f"condition {lab!r} has no training cells")
    if len(plan.train.get(CONTROL, [])) == 0:
        raise ConfigError("no control cells in the training split")
    raw = {lab: dataset.condition(lab) for lab in conditions}
    for cond in raw.values():
        context_forward(cond, model.context_mode, model.table, model.w_drug, model.w_dose)

    latent = _latent_codes(dataset.X, autoencoder)
    if latent.shape[1] != model.latent_dim:
        raise ConfigError(f"map latent width {model.latent_dim} does not match codes of width {latent.shape[1]}")

    cond_ss, batch_ss = np.random.SeedSequence(config.seed).spawn(2)
    cond_rng = np.random.default_rng(cond_ss)
    batch_rng = np.random.default_rng(batch_ss)
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    params = model.trainable()
    history = TrainHistory(seed=config.seed)
    start = time.perf_counter()
    for step in range(int(config.iterations)):
        lab = sample_condition(cond_rng, conditions)
        src = sample_indices(plan, lab, config.batch_size, "source", batch_rng)
        tgt = sample_indices(plan, lab, config.batch_size, "target", batch_rng)
        report, grads = loss_and_grad(
            model, latent[src], latent[tgt], raw[lab], config.sinkhorn_max_iter, config.sinkhorn_tol
        )
        params, state = adamw_step(params, grads, state)
        model = model.with_trainable(params)
        rec = TrainRecord(step, lab, report.fitting_term, report.gap_term, report.total, time.perf_counter() - start)
        history.records.append(rec)
        if callback is not None:
            callback(rec)
    return model, history


def predict(model, autoencoder, cells, cond):
    """Counterfactual per cell: ``D(E(x) + T([E(x), c]))``; identity codec when ``autoencoder`` is None."""
    cells = check_points(cells, "cells")
    Z = _latent_codes(cells, autoencoder)
    out = transport_latent(model, Z, cond)
    return out if autoencoder is None else decode(autoencoder, out)


CHECKPOINT_KIND = "map"


def save_map_model(path, model, seed=None, step=None):
    arrays = mlp_to_arrays(model.monge_net, "monge_net")
    meta = {
        "kind": CHECKPOINT_KIND,
        "context_mode": model.context_mode,
        "epsilon": model.epsilon,
        "lambda": model.lambda_,
        "seed": seed,
        "step": step,
        "latent_dim": model.latent_dim,
        "monge_net_sizes": model.monge_net.sizes,
    }
    if model.context_mode == "drug_dose":
        arrays.update(mlp_to_arrays(model.w_drug, "w_drug"))
        arrays.update(mlp_to_arrays(model.w_dose, "w_dose"))
        keys = sorted(model.table.vectors)
        arrays["table"] = np.vstack([model.table.vectors[k] for k in keys])
        meta["table_keys"] = keys
        meta["table_source"] = model.table.source
    return save_arrays(path, arrays, meta)


def load_map_model(path):
    """Returns ``(model, meta)``."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"{path} does not hold a map checkpoint")
    w_drug = w_dose = table = None
    if meta["context_mode"] == "drug_dose":
        w_drug = mlp_from_arrays(arrays, "w_drug")
        w_dose = mlp_from_arrays(arrays, "w_dose")
        table = DrugEmbeddingTable(dict(zip(meta["table_keys"], arrays["table"])), meta["table_source"])
    model = MapModel(
        mlp_from_arrays(arrays, "monge_net"),
        meta["context_mode"],
        w_drug,
        w_dose,
        table,
        meta["epsilon"],
        meta["lambda"],
    )
    return model, meta


def _as_condition(condition):
    if isinstance(condition, RawCondition):
        return condition
    return RawCondition.from_label(condition)


class ConditionalMongeMap(BaseEstimator):
    """Scikit-learn style wrapper around :func:`train_map`.

    ``fit(X, y)`` takes cells and their condition labels (``"control"`` for
    the source population); every given row is used for training.
    ``predict(X, condition)`` maps control cells to the named condition.

    Examples
    --------
    >>> est = ConditionalMongeMap(context_mode="dose", n_iter=200)  # doctest: +SKIP
    >>> est.fit(X, labels).predict(X_control, "drug0-100")           # doctest: +SKIP
    """

    def __init__(
        self,
        context_mode="dose",
        hidden=DEFAULT_HIDDEN,
        drug_dim=50,
        epsilon=ot.DEFAULT_EPSILON,
        lambda_=1e-2,
        n_iter=1000,
        batch_size=256,
        lr=1e-4,
        weight_decay=1e-5,
        embedding_table=None,
        autoencoder=None,
        random_state=0,
    ):
        self.context_mode = context_mode
        self.hidden = hidden
        self.drug_dim = drug_dim
        self.epsilon = epsilon
        self.lambda_ = lambda_
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.embedding_table = embedding_table
        self.autoencoder = autoencoder
        self.random_state = random_state

    def _codec(self):
        ae = self.autoencoder
        if ae is None or isinstance(ae, AutoencoderParams):
            return ae
        check_is_fitted(ae, "params_")
        return ae.params_

    def fit(self, X, y):
        X = check_points(X, "X", min_samples=2)
        if len(y) != X.shape[0]:
            raise ValueError(f"{len(y)} labels for {X.shape[0]} rows")
        dataset = CellDataset(X, y)
        train = {lab: dataset.rows(lab) for lab in [CONTROL, *dataset.condition_labels]}
        plan = SplitPlan("id", train, {}, [])
        codec = self._codec()
        latent_dim = X.shape[1] if codec is None else codec.latent_dim
        model = init_map_model(
            latent_dim,
            self.context_mode,
            tuple(self.hidden),
            self.embedding_table,
            self.drug_dim,
            self.epsilon,
            self.lambda_,
            self.random_state,
        )
        config = TrainConfig(self.n_iter, self.batch_size, self.lr, self.weight_decay, self.random_state)
        self.model_, self.history_ = train_map(model, dataset, plan, config, codec)
        self.conditions_ = dataset.condition_labels
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, condition):
        check_is_fitted(self, "model_")
        X = check_points(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return predict(self.model_, self._codec(), X, _as_condition(condition))

    def transform_latent(self, Z, condition):
        check_is_fitted(self, "model_")
        return transport_latent(self.model_, Z, _as_condition(condition))
