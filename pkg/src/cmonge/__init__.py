"""Conditional Monge gap transport maps for perturbation response prediction."""

__version__ = "0.1.0"

from .autoencoder import Autoencoder, AutoencoderConfig, AutoencoderParams, train_autoencoder
from .conditioning import (
    SMACOF,
    DrugEmbeddingTable,
    RawCondition,
    canonical_label,
    encode_condition,
    encode_dose,
    moa_embedding,
    pool_drug_embeddings,
)
from .data import CellDataset, SplitPlan, SynthSpec, generate_synthetic, load_dataset, make_split, save_dataset
from .exceptions import CMongeError, ConfigError, DataError, NotFittedError, NumericalError
from .metrics import EvalReport, evaluate_condition, mmd, r_squared_means, wasserstein_metric
from .monge import conditional_loss_step, monge_gap, monge_gap_gradient
from .ot import DiscreteMeasure, divergence_gradient, exact_ot_oracle, sinkhorn, sinkhorn_divergence
from .trainer import ConditionalMongeMap, MapModel, predict, train_map

__all__ = [
    "Autoencoder",
    "AutoencoderConfig",
    "AutoencoderParams",
    "CMongeError",
    "CellDataset",
    "ConditionalMongeMap",
    "ConfigError",
    "DataError",
    "DiscreteMeasure",
    "DrugEmbeddingTable",
    "EvalReport",
    "MapModel",
    "NotFittedError",
    "NumericalError",
    "RawCondition",
    "SMACOF",
    "SplitPlan",
    "SynthSpec",
    "canonical_label",
    "conditional_loss_step",
    "divergence_gradient",
    "encode_condition",
    "encode_dose",
    "evaluate_condition",
    "exact_ot_oracle",
    "generate_synthetic",
    "load_dataset",
    "make_split",
    "mmd",
    "moa_embedding",
    "monge_gap",
    "monge_gap_gradient",
    "pool_drug_embeddings",
    "predict",
    "r_squared_means",
    "save_dataset",
    "sinkhorn",
    "sinkhorn_divergence",
    "train_autoencoder",
    "train_map",
    "wasserstein_metric",
]
