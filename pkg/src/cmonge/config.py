"""Experiment configuration: nested YAML, validated in full before any compute.

Precedence, lowest first: dataclass defaults, the ``--config`` file, then
command-line flags. Unknown keys anywhere are rejected.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .conditioning import CONTEXT_MODES
from .data import SCENARIOS, SynthSpec
from .exceptions import ConfigError


@dataclass
class DataSection:
    path: str = None
    conditions_path: str = None
    drugs: list = None  # restrict to these drugs (plus control)
    synthetic: SynthSpec = field(default_factory=SynthSpec)


@dataclass
class SplitSection:
    scenario: str = "id"
    test_fraction: float = 0.2
    holdout_doses: list = field(default_factory=list)
    holdout_drugs: list = field(default_factory=list)
    fold_size: int = 9
    fold: int = 0
    probe_fraction: float = 0.2
    hygiene: str = "strict"  # "lax" lets OOD cells into autoencoder and MoA fits


@dataclass
class AutoencoderSection:
    latent_dim: int = 50
    hidden: list = field(default_factory=lambda: [512, 512])
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-5


@dataclass
class EmbeddingSection:
    source: str = "moa"
    path: str = None  # fingerprint file, or a precomputed MoA table
    epsilon: float = 1.0
    dim: int = 10
    max_cells: int = 256
    sinkhorn_max_iter: int = 5000
    sinkhorn_tol: float = 1e-4


@dataclass
class ModelSection:
    context_mode: str = "drug_dose"
    grouping: str = "global"  # or "per_drug": one model per drug
    hidden: list = field(default_factory=lambda: [64, 64, 64, 64])
    drug_dim: int = 50
    epsilon: float = 0.1
    lambda_: float = 1e-2


@dataclass
class TrainSection:
    iterations: int = 1000
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-5
    sinkhorn_max_iter: int = 5000
    sinkhorn_tol: float = 1e-4


@dataclass
class EvalSection:
    n_batches: int = 10
    batch_size: int = 256
    epsilon: float = 1.0
    feature_subset: list = None
    identity_baseline: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        _check(self.split.scenario in SCENARIOS, f"split.scenario must be one of {SCENARIOS}")
        _check(self.split.hygiene in ("strict", "lax"), "split.hygiene must be 'strict' or 'lax'")
        _check(self.model.context_mode in CONTEXT_MODES, f"model.context_mode must be one of {CONTEXT_MODES}")
        _check(self.model.grouping in ("global", "per_drug"), "model.grouping must be 'global' or 'per_drug'")
        _check(self.embedding.source in ("fingerprint", "moa"), "embedding.source must be 'fingerprint' or 'moa'")
        _check(
            self.embedding.source != "fingerprint" or self.model.context_mode != "drug_dose" or self.embedding.path,
            "fingerprint embeddings need embedding.path",
        )
        for name, value in [
            ("autoencoder.latent_dim", self.autoencoder.latent_dim),
            ("autoencoder.epochs", self.autoencoder.epochs),
            ("autoencoder.batch_size", self.autoencoder.batch_size),
            ("embedding.dim", self.embedding.dim),
            ("embedding.max_cells", self.embedding.max_cells),
            ("embedding.sinkhorn_max_iter", self.embedding.sinkhorn_max_iter),
            ("model.drug_dim", self.model.drug_dim),
            ("train.iterations", self.train.iterations),
            ("train.batch_size", self.train.batch_size),
            ("train.sinkhorn_max_iter", self.train.sinkhorn_max_iter),
            ("eval.n_batches", self.eval.n_batches),
            ("eval.batch_size", self.eval.batch_size),
        ]:
            _check(isinstance(value, int) and not isinstance(value, bool) and value > 0, f"{name} must be a positive integer")
        for name, value in [
            ("autoencoder.lr", self.autoencoder.lr),
            ("train.lr", self.train.lr),
            ("embedding.epsilon", self.embedding.epsilon),
            ("model.epsilon", self.model.epsilon),
            ("eval.epsilon", self.eval.epsilon),
            ("train.sinkhorn_tol", self.train.sinkhorn_tol),
            ("embedding.sinkhorn_tol", self.embedding.sinkhorn_tol),
        ]:
            _check(_is_number(value) and value > 0, f"{name} must be a positive number")
        for name, value in [
            ("autoencoder.weight_decay", self.autoencoder.weight_decay),
            ("train.weight_decay", self.train.weight_decay),
            ("model.lambda", self.model.lambda_),
        ]:
            _check(_is_number(value) and value >= 0, f"{name} must be a non-negative number")
        for name, sizes in [("autoencoder.hidden", self.autoencoder.hidden), ("model.hidden", self.model.hidden)]:
            _check(
                isinstance(sizes, list) and all(isinstance(h, int) and h > 0 for h in sizes),
                f"{name} must be a list of positive integers",
            )
        _check(0 <= self.split.test_fraction < 1, "split.test_fraction must lie in [0, 1)")
        _check(0 <= self.split.probe_fraction < 1, "split.probe_fraction must lie in [0, 1)")
        if self.eval.feature_subset is not None:
            _check(
                isinstance(self.eval.feature_subset, list)
                and self.eval.feature_subset
                and all(isinstance(i, int) and i >= 0 for i in self.eval.feature_subset),
                "eval.feature_subset must be a non-empty list of column indices",
            )
        if self.data.path is None:
            self.data.synthetic.validate()
        return self

    def to_dict(self, include_out=True):
        out = _to_plain(self)
        out["model"]["lambda"] = out["model"].pop("lambda_")
        if not include_out:
            del out["out"]
        return out

    def digest(self):
        """sha256 of the canonical JSON form, output directory excluded."""
        return hashlib.sha256(json.dumps(self.to_dict(include_out=False), sort_keys=True).encode()).hexdigest()


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(ok, message):
    if not ok:
        raise ConfigError(message)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_ALIASES = {"lambda": "lambda_"}
_TUPLE_FIELDS = {"doses", "cov_scale_range", "combinations"}


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        path = f"{where}.{key}" if where else key
        if name not in fields:
            raise ConfigError(f"unknown config key {path!r}")
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, path)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw):
    return _build(ExperimentConfig, raw or {}, "").validate()


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
