"""Desk-scale simulator of personalized federated segmentation.

A frozen toy ViT encoder and mask decoder are adapted per client with LoRA
and a localized mixture of convolutional experts (L-MoE). Only the global
LoRA parameters and the decoder are averaged on the server; the L-MoE
modules never leave the client, and a distillation term ties each
personalized model to the round-start global model.
"""
__version__ = "0.1.0"

from .adapters import LmoeAdapter, LoraAdapter, load_balance_loss, lmoe_forward, lora_forward
from .config import ExperimentConfig, parse_config
from .data import DatasetSpec, Sample, default_client_specs, generate_client, split
from .errors import (
    ConfigError,
    FormatError,
    GenerationError,
    NumericError,
    PFedSAMError,
    ProtocolError,
    ShapeError,
    ValidationError,
)
from .estimator import FederatedSegmenter
from .federation import (
    PRESETS,
    ClientState,
    FedConfig,
    RoundReport,
    ServerState,
    client_global_update,
    client_personalized_update,
    run_experiment,
    run_round,
    server_aggregate,
)
from .losses import LossWeights, ce_loss, kd_loss, personalized_loss
from .metrics import EvalResult, dice_iou, evaluate
from .numerics import Tensor, backward, grad_check
from .segmodel import ModelConfig, SegModel, build_model, count_params_flops, partition_params

__all__ = [
    "ClientState", "ConfigError", "DatasetSpec", "EvalResult", "ExperimentConfig", "FedConfig",
    "FederatedSegmenter", "FormatError", "GenerationError", "LmoeAdapter", "LoraAdapter", "LossWeights",
    "ModelConfig", "NumericError", "PFedSAMError", "PRESETS", "ProtocolError", "RoundReport", "Sample",
    "SegModel", "ServerState", "ShapeError", "Tensor", "ValidationError", "backward", "build_model",
    "ce_loss", "client_global_update", "client_personalized_update", "count_params_flops",
    "default_client_specs", "dice_iou", "evaluate", "generate_client", "grad_check", "kd_loss",
    "lmoe_forward", "load_balance_loss", "lora_forward", "parse_config", "partition_params",
    "personalized_loss", "run_experiment", "run_round", "server_aggregate", "split",
]
