"""Run configuration: INI files mapped onto the dataclass configs.

Parsing is strict: unknown sections or keys fail loudly, as do malformed
values, and the one required key (``data.dataset``) is named when absent.
Model geometry (bit depth, image shape, channel count) always comes from
the data section so the two cannot drift apart; the ``[model]`` section
only carries architecture choices.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .autodiff import RoundingConfig
from .data import SynthDataset, ToyDataset
from .errors import ConfigError
from .flows import FlowConfig
from .train import TrainConfig

_BOOL_WORDS = {
    "true": True,
    "yes": True,
    "on": True,
    "1": True,
    "false": False,
    "no": False,
    "off": False,
    "0": False,
}

_DATA_KEYS = {
    "dataset": str,
    "bits": int,
    "train_images": int,
    "height": int,
    "width": int,
    "seed": int,
    "val_fraction": float,
}

# Architecture only; geometry comes from [data].
_MODEL_KEYS = {
    "levels": int,
    "couplings": int,
    "s2d_factor": int,
    "untransformed": str,
    "variant": str,
    "groupnorm": bool,
    "net_depth": int,
    "net_hidden": int,
    "prior_components": int,
    "cond_depth": int,
    "cond_hidden": int,
    "perm_kind": str,
    "perm_seed": int,
    "invert_perms": bool,
    "rezero": bool,
}

_TRAIN_KEYS = {
    "epochs": int,
    "iters_per_epoch": int,
    "batch_size": int,
    "seed": int,
    "coupling_lr": float,
    "prior_lr": float,
    "lr_decay": float,
    "warmup_epochs": int,
    "use_ema": bool,
    "ema_decay": float,
    "rounding_forward": str,
    "rounding_backward": str,
    "temperature": float,
    "continuous": bool,
    "checkpoint_every": int,
}

_RUN_KEYS = {"out_dir": str}

_SECTIONS = {
    "data": _DATA_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "run": _RUN_KEYS,
}


@dataclass(frozen=True)
class DataConfig:
    """Which source to train on and its shape."""

    dataset: str
    bits: int = 8
    train_images: int = 512
    height: int = 8
    width: int = 8
    seed: int = 0
    val_fraction: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs: source, architecture, schedule, paths."""

    data: DataConfig
    model: FlowConfig
    train: TrainConfig
    out_dir: str = "runs"


def _convert(section: str, key: str, raw: str, kind):
    if kind is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"{section}.{key} expects a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def _section_values(parser: configparser.ConfigParser, section: str) -> dict:
    if not parser.has_section(section):
        return {}
    keys = _SECTIONS[section]
    out = {}
    for key, raw in parser.items(section):
        if key not in keys:
            raise ConfigError(f"unknown key {section}.{key}")
        out[key] = _convert(section, key, raw, keys[key])
    return out


def _base_model_dict(data: DataConfig) -> dict:
    if data.dataset == "toy":
        from .analysis import toy_flow_config

        return toy_flow_config(data.bits).to_dict()
    return FlowConfig(
        bits=data.bits, channels=1, height=data.height, width=data.width
    ).to_dict()


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse INI text into a RunConfig; every problem raises ConfigError."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    data_values = _section_values(parser, "data")
    if "dataset" not in data_values:
        raise ConfigError("data.dataset is required")
    if data_values["dataset"] not in ("toy", "synth"):
        raise ConfigError(f"unknown dataset {data_values['dataset']!r}")
    data = DataConfig(**data_values)

    model_values = _section_values(parser, "model")
    if "groupnorm" in model_values:
        if "variant" in model_values:
            raise ConfigError("model.groupnorm and model.variant are mutually exclusive")
        model_values["variant"] = "gn_swish" if model_values.pop("groupnorm") else "relu"
    model = FlowConfig.from_dict({**_base_model_dict(data), **model_values})

    train_values = _section_values(parser, "train")
    rounding = RoundingConfig(
        forward=train_values.pop("rounding_forward", "hard_round"),
        backward=train_values.pop("rounding_backward", "identity"),
        temperature=train_values.pop("temperature", 1.0),
    )
    train = TrainConfig(rounding=rounding, **train_values)

    run_values = _section_values(parser, "run")
    return RunConfig(data=data, model=model, train=train, **run_values)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path))


def build_dataset(data: DataConfig):
    if data.dataset == "toy":
        from .analysis import toy_pmf

        return ToyDataset(toy_pmf(data.bits), data.bits)
    return SynthDataset(
        train_images=data.train_images,
        bits=data.bits,
        seed=data.seed,
        val_fraction=data.val_fraction,
        height=data.height,
        width=data.width,
    )


def render_config(rc: RunConfig) -> str:
    """Deterministic INI rendering of the fully resolved configuration."""
    lines = ["[data]"]
    for key, value in sorted(asdict(rc.data).items()):
        lines.append(f"{key} = {value}")
    lines.append("")
    lines.append("[model]")
    # Geometry is owned by [data]; echoing it here would make the rendered
    # text unparseable.
    for key, value in sorted(rc.model.to_dict().items()):
        if key in _MODEL_KEYS:
            lines.append(f"{key} = {value}")
    lines.append("")
    lines.append("[train]")
    train_values = {}
    for f in fields(rc.train):
        value = getattr(rc.train, f.name)
        if f.name == "rounding":
            train_values["rounding_forward"] = value.forward
            train_values["rounding_backward"] = value.backward
            train_values["temperature"] = value.temperature
        else:
            train_values[f.name] = value
    for key in sorted(train_values):
        lines.append(f"{key} = {train_values[key]}")
    lines.append("")
    lines.append("[run]")
    lines.append(f"out_dir = {rc.out_dir}")
    return "\n".join(lines) + "\n"
