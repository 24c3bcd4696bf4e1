"""Shared fixtures: deterministic RNGs and briefly trained models.

Trained-model fixtures are session scoped because even a short run costs
seconds; tests that mutate parameters must deep-copy the model first.
"""

from __future__ import annotations

import numpy as np
import pytest

from intflow.analysis import make_toy_dataset, train_toy
from intflow.data import SynthDataset
from intflow.flows import FlowConfig, build_flow_model
from intflow.train import TrainConfig, train


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy1_data():
    return make_toy_dataset(1)


@pytest.fixture(scope="session")
def trained_toy1():
    """A short 1-bit toy run; enough to move well off the identity init."""
    model, result = train_toy(1, seed=0, iterations=600)
    return model, result


@pytest.fixture(scope="session")
def synth_setup():
    """A small 4x4 synthetic dataset with a briefly trained two-level model."""
    dataset = SynthDataset(train_images=96, bits=8, seed=7, height=4, width=4)
    config = FlowConfig(
        bits=8,
        channels=1,
        height=4,
        width=4,
        levels=2,
        couplings=1,
        s2d_factor=2,
        net_depth=1,
        net_hidden=8,
        prior_components=3,
        cond_depth=1,
        cond_hidden=8,
    )
    model = build_flow_model(config)
    model.initialize(3)
    cfg = TrainConfig(
        epochs=2,
        iters_per_epoch=30,
        batch_size=32,
        seed=5,
        use_ema=False,
        warmup_epochs=1,
        lr_decay=1.0,
    )
    result = train(model, dataset, cfg)
    return dataset, model, result
