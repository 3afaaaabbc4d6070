"""End-to-end experiment steps shared by the command line and the test suite."""

import zlib
from dataclasses import dataclass

import numpy as np

from .autoencoder import AutoencoderConfig, train_autoencoder
from .conditioning import SMACOF, DrugEmbeddingTable, cross_wasserstein, pairwise_wasserstein
from .config import ExperimentConfig
from .data import generate_synthetic, load_dataset, make_split
from .exceptions import ConfigError, DataError
from .metrics import EvalConfig, evaluate_condition
from .trainer import TrainConfig, init_map_model, predict, train_map


def derive_seed(seed, *tags):
    """Independent integer seed for a named sub-task."""
    words = [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def load_data(config):
    """Returns ``(dataset, truth)``; ``truth`` is None for files on disk."""
    if config.data.path is not None:
        dataset, truth = load_dataset(config.data.path, config.data.conditions_path), None
    else:
        dataset, truth = generate_synthetic(config.data.synthetic)
    if config.data.drugs:
        dataset = dataset.restrict_to_drugs(config.data.drugs)
    return dataset, truth


def make_plan(dataset, config):
    s = config.split
    params = {
        "test_fraction": s.test_fraction,
        "probe_fraction": s.probe_fraction,
        "holdout_doses": list(s.holdout_doses),
        "holdout_drugs": list(s.holdout_drugs),
        "fold_size": s.fold_size,
        "fold": s.fold,
    }
    return make_split(dataset, s.scenario, params, derive_seed(config.seed, "split"))


def autoencoder_rows(dataset, plan, hygiene="strict"):
    """Rows the autoencoder may see; ``strict`` keeps every test and OOD cell out."""
    if hygiene == "lax":
        return np.arange(dataset.n_cells)
    return plan.training_rows()


def fit_autoencoder(dataset, plan, config):
    a = config.autoencoder
    if a.latent_dim > dataset.n_features:
        raise ConfigError(f"autoencoder.latent_dim {a.latent_dim} exceeds {dataset.n_features} features")
    ae_config = AutoencoderConfig(
        latent_dim=a.latent_dim,
        hidden=tuple(a.hidden),
        epochs=a.epochs,
        batch_size=a.batch_size,
        lr=a.lr,
        weight_decay=a.weight_decay,
        seed=derive_seed(config.seed, "autoencoder"),
    )
    return train_autoencoder(dataset.X[autoencoder_rows(dataset, plan, config.split.hygiene)], ae_config)


@dataclass
class MoaResult:
    table: DrugEmbeddingTable
    smacof: SMACOF
    labels: list
    distances: np.ndarray


def _population(X, rows, max_cells, rng):
    rows = np.asarray(rows)
    if rows.size > max_cells:
        rows = np.sort(rng.choice(rows, size=max_cells, replace=False))
    return X[rows]


def build_moa_table(dataset, plan, config):
    """One MoA vector per condition population, keyed by condition label.

    Under ``strict`` hygiene the MDS configuration is fitted on training
    populations only and each OOD condition is then placed against it using
    its probe cells. ``lax`` embeds every condition jointly from all of its
    cells.
    """
    e = config.embedding
    rng = np.random.default_rng(derive_seed(config.seed, "moa"))
    smacof = SMACOF(n_components=e.dim, random_state=derive_seed(config.seed, "smacof"))
    labels = dataset.condition_labels
    if config.split.hygiene == "lax":
        fit_labels = labels
        pops = [_population(dataset.X, dataset.rows(lab), e.max_cells, rng) for lab in fit_labels]
    else:
        fit_labels = plan.train_conditions
        pops = [_population(dataset.X, plan.train[lab], e.max_cells, rng) for lab in fit_labels]
    if len(fit_labels) < 2:
        raise ConfigError("MoA embedding needs at least two training conditions")
    D = pairwise_wasserstein(pops, e.epsilon, e.sinkhorn_max_iter, e.sinkhorn_tol, names=fit_labels)
    coords = dict(zip(fit_labels, smacof.fit_transform(D)))
    extra = [lab for lab in labels if lab not in coords]
    if extra:
        probes = []
        for lab in extra:
            rows = plan.probe.get(lab, [])
            if len(rows) == 0:
                raise DataError(f"no probe cells to place OOD condition {lab!r}; raise split.probe_fraction or use lax hygiene")
            probes.append(_population(dataset.X, rows, e.max_cells, rng))
        D_new = cross_wasserstein(
            probes, pops, e.epsilon, e.sinkhorn_max_iter, e.sinkhorn_tol, names_a=extra, names_b=fit_labels
        )
        coords.update(zip(extra, smacof.transform(D_new)))
    table = DrugEmbeddingTable({lab: coords[lab] for lab in labels}, source="moa")
    return MoaResult(table, smacof, list(fit_labels), D)


def model_groups(dataset, plan, config):
    """``{group: (train_conditions, eval_conditions)}``."""
    evals = sorted(set(plan.test_conditions))
    if config.model.grouping == "global":
        return {"global": (plan.train_conditions, evals)}
    groups = {}
    for drug in dataset.drugs:
        train = [lab for lab in plan.train_conditions if dataset.condition(lab).drug_ids == (drug,)]
        ev = [lab for lab in evals if dataset.condition(lab).drug_ids == (drug,)]
        if ev and not train:
            raise ConfigError(f"per_drug grouping cannot predict held-out drug {drug!r}")
        if train:
            groups[drug] = (train, ev)
    return groups


def model_tag(context_mode):
    return {"none": "monge", "dose": "cmonge-dose", "drug_dose": "cmonge-drugdose"}[context_mode]


def train_models(dataset, plan, autoencoder, config, table=None, callback=None):
    """Train one map per group; returns ``{group: (model, history)}``."""
    m, t = config.model, config.train
    latent_dim = autoencoder.latent_dim if autoencoder is not None else dataset.n_features
    out = {}
    for name, (train_conds, _) in model_groups(dataset, plan, config).items():
        model = init_map_model(
            latent_dim,
            m.context_mode,
            tuple(m.hidden),
            table if m.context_mode == "drug_dose" else None,
            m.drug_dim,
            m.epsilon,
            m.lambda_,
            derive_seed(config.seed, "map-init", name),
        )
        tc = TrainConfig(
            t.iterations,
            t.batch_size,
            t.lr,
            t.weight_decay,
            derive_seed(config.seed, "map-train", name),
            t.sinkhorn_max_iter,
            t.sinkhorn_tol,
        )
        out[name] = train_map(model, dataset, plan, tc, autoencoder, train_conds, callback)
    return out


def evaluate_models(dataset, plan, autoencoder, models, config, identity=False):
    """Reports for every evaluable condition; ``identity`` evaluates the baseline instead."""
    e = config.eval
    eval_config = EvalConfig(e.n_batches, e.batch_size, e.epsilon, e.feature_subset, derive_seed(config.seed, "eval"))
    if identity:
        return [evaluate_condition(None, dataset, plan, lab, eval_config, "identity") for lab in plan.test_conditions]
    reports = []
    for name, (_, eval_conds) in model_groups(dataset, plan, config).items():
        for lab in eval_conds:
            model = models[name][0] if isinstance(models[name], tuple) else models[name]

            def fn(cells, cond, model=model):
                return predict(model, autoencoder, cells, cond)

            reports.append(evaluate_condition(fn, dataset, plan, lab, eval_config, model_tag(model.context_mode)))
    return sorted(reports, key=lambda r: (r.condition, r.model))


def run_experiment(config, table=None, identity=True):
    """Whole pipeline in memory; handy for experiments and tests."""
    if not isinstance(config, ExperimentConfig):
        raise TypeError("config must be an ExperimentConfig")
    config.validate()
    dataset, truth = load_data(config)
    plan = make_plan(dataset, config)
    ae = fit_autoencoder(dataset, plan, config)
    moa = None
    if config.model.context_mode == "drug_dose" and table is None:
        moa = build_moa_table(dataset, plan, config)
        table = moa.table
    models = train_models(dataset, plan, ae, config, table)
    reports = evaluate_models(dataset, plan, ae, models, config)
    baseline = evaluate_models(dataset, plan, ae, models, config, identity=True) if identity else []
    return {
        "dataset": dataset,
        "truth": truth,
        "plan": plan,
        "autoencoder": ae,
        "moa": moa,
        "models": models,
        "reports": reports,
        "identity": baseline,
    }
