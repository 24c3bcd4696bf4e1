"""Lossless image compression with integer discrete flows on lattice codes.

Common entry points are re-exported lazily: the command line module must
be importable before numpy loads so that thread caps from the environment
still take effect, and eager re-exports would defeat that.
"""

from __future__ import annotations

import importlib

from .errors import (
    BijectionError,
    CapacityError,
    ConfigError,
    DimensionError,
    DomainError,
    IntflowError,
    ParameterError,
    StreamCorruptionError,
    StreamFormatError,
    TrainingDivergence,
    TrainingError,
    UsageError,
)

__version__ = "0.1.0"

_EXPORTS = {
    "GridTensor": "grid",
    "ChannelPermutation": "grid",
    "Node": "autodiff",
    "Parameter": "autodiff",
    "RoundingConfig": "autodiff",
    "FlowConfig": "flows",
    "FlowModel": "flows",
    "build_flow_model": "flows",
    "FlattenFlow": "flows",
    "build_flatten_flow": "flows",
    "flatten_bpd": "flows",
    "latent_alphabet": "flows",
    "training_loss": "flows",
    "save_model": "flows",
    "load_model": "flows",
    "model_fingerprint": "flows",
    "verify_bijection": "flows",
    "compress": "codec",
    "decompress": "codec",
    "stream_bpd": "codec",
    "TrainConfig": "train",
    "TrainResult": "train",
    "train": "train",
    "ToyDataset": "data",
    "SynthDataset": "data",
    "read_raw_image": "data",
    "write_raw_image": "data",
    "DataConfig": "config",
    "RunConfig": "config",
    "load_config": "config",
    "parse_config": "config",
    "build_dataset": "config",
    "toy_pmf": "analysis",
    "agreement_sweep": "analysis",
    "estimator_matrix": "analysis",
    "flatten_demo": "analysis",
    "landscape_axes": "analysis",
    "landscape_slice": "analysis",
}


def __getattr__(name: str):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__() -> list[str]:
    return sorted(set(globals()) | set(_EXPORTS))
