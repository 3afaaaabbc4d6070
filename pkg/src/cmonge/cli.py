"""Command line entry point: ``cmonge <command> [flags]``.

Commands share one output directory (``--out``)::

    gen-synth   dataset.csv, conditions.csv, truth.json
    train-ae    autoencoder.bin, split.json
    embed-moa   moa_embedding.csv
    train-map   map_<tag>_<group>.bin, history_<tag>_<group>.csv
    evaluate    report_<tag>.csv, report_<tag>_long.csv, summary_<tag>.txt

Every command also writes ``manifest_<command>[_<tag>].json`` with the
resolved config, its hash and the checksums of inputs and outputs.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .autoencoder import load_autoencoder, save_autoencoder
from .conditioning import load_embedding_table, save_embedding_table
from .config import config_from_dict, load_config
from .data import generate_synthetic, load_dataset, save_dataset
from .exceptions import ConfigError, DataError, NumericalError
from .metrics import long_table, report_table, summary_text
from .pipeline import (
    build_moa_table,
    evaluate_models,
    fit_autoencoder,
    make_plan,
    model_groups,
    model_tag,
    train_models,
)
from .serialization import file_sha256
from .trainer import load_map_model, save_map_model

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
COMMANDS = ("gen-synth", "train-ae", "embed-moa", "train-map", "evaluate")
_CONTEXT_FLAG = {"none": "none", "dose": "dose", "drugdose": "drug_dose"}


def build_parser():
    parser = argparse.ArgumentParser(prog="cmonge", description="Conditional Monge gap maps for perturbation data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="overrides seed")
        p.add_argument("--out", help="output directory, overrides out")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--scenario", choices=["id", "dose_ood", "drug_ood", "k_fold_drug_ood"])
        p.add_argument("--context-mode", choices=sorted(_CONTEXT_FLAG))
        p.add_argument("--embedding", choices=["fingerprint", "moa"])
        p.add_argument("--identity-baseline", action="store_true", help="evaluate the identity baseline")
    return parser


def resolve_config(args):
    config = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = args.out
    if args.scenario is not None:
        config.split.scenario = args.scenario
    if args.context_mode is not None:
        config.model.context_mode = _CONTEXT_FLAG[args.context_mode]
    if args.embedding is not None:
        config.embedding.source = args.embedding
    if args.identity_baseline:
        config.eval.identity_baseline = True
    return config.validate()


class Run:
    """Output bookkeeping for one command."""

    def __init__(self, command, config, force, tag=None):
        self.command = command
        self.config = config
        self.force = force
        self.out = Path(config.out)
        self.inputs = {}
        self.outputs = []
        self.manifest = self.out / (f"manifest_{command}" + (f"_{tag}" if tag else "") + ".json")

    def need(self, name):
        path = self.out / name
        if not path.exists():
            raise ConfigError(f"missing prerequisite {path}; run the earlier pipeline step first")
        self.inputs[name] = file_sha256(path)
        return path

    def note_input(self, path):
        self.inputs[str(path)] = file_sha256(path)

    def claim(self, *names):
        """Reserve output names, refusing to clobber without ``--force``."""
        for name in [*names, self.manifest.name]:
            path = self.out / name
            if path.exists() and not self.force:
                raise ConfigError(f"{path} exists; pass --force to overwrite")
        self.outputs.extend(names)
        return [self.out / n for n in names]

    def finish(self):
        produced = {}
        for name in self.outputs:
            for path in (self.out / name, self.out / (name + ".json")):
                if path.exists():
                    produced[path.name] = file_sha256(path)
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.config.to_dict(include_out=False),
            "config_sha256": self.config.digest(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(produced.items())),
        }
        self.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset(run):
    if run.config.data.path is not None:
        run.note_input(run.config.data.path)
        if run.config.data.conditions_path:
            run.note_input(run.config.data.conditions_path)
        dataset = load_dataset(run.config.data.path, run.config.data.conditions_path)
    else:
        dataset = load_dataset(run.need("dataset.csv"), run.need("conditions.csv"))
    if run.config.data.drugs:
        dataset = dataset.restrict_to_drugs(run.config.data.drugs)
    return dataset


def cmd_gen_synth(config, force):
    run = Run("gen-synth", config, force)
    data_path, cond_path, truth_path = run.claim("dataset.csv", "conditions.csv", "truth.json")
    dataset, truth = generate_synthetic(config.data.synthetic)
    run.out.mkdir(parents=True, exist_ok=True)
    save_dataset(data_path, dataset, cond_path)
    truth_path.write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    run.finish()
    print(f"{dataset.n_cells} cells x {dataset.n_features} features, {len(dataset.condition_labels) + 1} conditions")
    for lab in ["control", *dataset.condition_labels]:
        print(f"  {lab:<24} {dataset.rows(lab).size}")


def cmd_train_ae(config, force):
    run = Run("train-ae", config, force)
    dataset = _dataset(run)
    ae_path, split_path = run.claim("autoencoder.bin", "split.json")
    plan = make_plan(dataset, config)
    ae = fit_autoencoder(dataset, plan, config)
    save_autoencoder(ae_path, ae, seed=config.seed)
    split_path.write_text(plan.to_json() + "\n")
    run.finish()
    print(f"autoencoder latent {ae.latent_dim}, final reconstruction MSE {ae.loss_history[-1]:.6g}")


def cmd_embed_moa(config, force):
    run = Run("embed-moa", config, force)
    dataset = _dataset(run)
    (table_path,) = run.claim("moa_embedding.csv")
    plan = make_plan(dataset, config)
    moa = build_moa_table(dataset, plan, config)
    save_embedding_table(table_path, moa.table)
    run.finish()
    print(f"MoA embedding of {len(moa.table.vectors)} conditions, dim {moa.table.dim}, stress {moa.smacof.stress_:.6g}")


def _embedding_table(run, dataset, plan):
    config = run.config
    if config.model.context_mode != "drug_dose":
        return None
    if config.embedding.path:
        path = Path(config.embedding.path)
        if not path.exists():
            raise DataError(f"embedding file {path} not found")
        run.note_input(path)
        table = load_embedding_table(path)
        if table.source != config.embedding.source:
            raise ConfigError(f"{path} holds {table.source} embeddings, config asks for {config.embedding.source}")
        return table
    if config.embedding.source == "fingerprint":
        raise ConfigError("fingerprint embeddings need embedding.path")
    if (run.out / "moa_embedding.csv").exists():
        return load_embedding_table(run.need("moa_embedding.csv"))
    return build_moa_table(dataset, plan, config).table


def cmd_train_map(config, force):
    tag = model_tag(config.model.context_mode)
    run = Run("train-map", config, force, tag)
    dataset = _dataset(run)
    ae = load_autoencoder(run.need("autoencoder.bin"))
    if ae.input_dim != dataset.n_features:
        raise ConfigError(f"autoencoder expects {ae.input_dim} features, dataset has {dataset.n_features}")
    plan = make_plan(dataset, config)
    groups = model_groups(dataset, plan, config)
    names = [n for g in groups for n in (f"map_{tag}_{g}.bin", f"history_{tag}_{g}.csv")]
    run.claim(*names)
    table = _embedding_table(run, dataset, plan)
    models = train_models(dataset, plan, ae, config, table)
    for group, (model, history) in models.items():
        save_map_model(run.out / f"map_{tag}_{group}.bin", model, seed=config.seed, step=len(history.records))
        (run.out / f"history_{tag}_{group}.csv").write_text(history.to_csv())
        totals = history.totals()
        print(f"{tag} {group}: {len(totals)} steps, loss {totals[0]:.4g} -> {totals[-10:].mean():.4g}")
    run.finish()


def cmd_evaluate(config, force):
    identity = config.eval.identity_baseline
    tag = "identity" if identity else model_tag(config.model.context_mode)
    run = Run("evaluate", config, force, tag)
    dataset = _dataset(run)
    plan = make_plan(dataset, config)
    ae, models = None, {}
    if not identity:
        ae = load_autoencoder(run.need("autoencoder.bin"))
        for group in model_groups(dataset, plan, config):
            model, _ = load_map_model(run.need(f"map_{tag}_{group}.bin"))
            if model.latent_dim != ae.latent_dim:
                raise ConfigError(f"map {group} has latent width {model.latent_dim}, autoencoder {ae.latent_dim}")
            models[group] = model
    report_path, long_path, summary_path = run.claim(f"report_{tag}.csv", f"report_{tag}_long.csv", f"summary_{tag}.txt")
    reports = evaluate_models(dataset, plan, ae, models, config, identity=identity)
    report_path.write_text(report_table(reports))
    long_path.write_text(long_table(reports))
    text = summary_text(reports)
    summary_path.write_text(text)
    run.finish()
    print(text, end="")


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "train-ae": cmd_train_ae,
    "embed-moa": cmd_embed_moa,
    "train-map": cmd_train_map,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        HANDLERS[args.command](config, args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
