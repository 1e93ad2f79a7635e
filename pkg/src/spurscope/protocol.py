"""Desk-scale experiment protocol shared by the CLI and the acceptance suite.

Training from scratch on a thousand 32×32 images needs a larger step than
the fine-tuning rate in :class:`TrainConfig`; the values here are the ones
the acceptance experiments use.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .data import Dataset, SpuriousDatasetSpec, build_balanced_testset
from .models import Model, SmallCnnConfig, SmallVitConfig
from .train import SweepRow, TrainConfig, sweep_entry, sweep_testset

N_PER_CLASS = 500
BASE_SEED = 1
TEST_SEED = 12345
TEST_PER_GROUP = 100

CNN_TRAIN = TrainConfig(epochs=30, lr=0.1, weight_decay=1e-4, batch_size=16)
VIT_TRAIN = TrainConfig(epochs=30, lr=0.05, weight_decay=1e-4, batch_size=16)

# balanced held-out streams of the test spec (stream 1 is the test set itself)
DFR_FIT_STREAM = 2
DFR_TUNE_STREAM = 3


def model_config(family: str):
    return SmallCnnConfig() if family == "cnn" else SmallVitConfig()


def train_config(family: str) -> TrainConfig:
    return CNN_TRAIN if family == "cnn" else VIT_TRAIN


def base_spec(one_sided: bool = False) -> SpuriousDatasetSpec:
    return SpuriousDatasetSpec(style="patch", n_per_class=N_PER_CLASS, one_sided=one_sided, seed=BASE_SEED)


def test_set(one_sided: bool = False) -> Dataset:
    return sweep_testset(base_spec(one_sided), TEST_PER_GROUP, TEST_SEED)


def held_out_balanced(stream: int, n_per_group: int = TEST_PER_GROUP) -> Dataset:
    return build_balanced_testset(replace(base_spec(), seed=TEST_SEED), n_per_group, stream=stream)


@dataclass
class ProtocolRun:
    family: str
    rho: float
    seed: int
    one_sided: bool
    row: SweepRow
    model: Model
    train_set: Dataset


def run(family: str, rho: float, seed: int, one_sided: bool = False, test: Dataset | None = None) -> ProtocolRun:
    """Train one protocol model. Identical to the matching minority-ratio sweep cell."""
    test = test if test is not None else test_set(one_sided)
    row, model, ds = sweep_entry(base_spec(one_sided), rho, seed, train_config(family), model_config(family), test)
    return ProtocolRun(family, rho, seed, one_sided, row, model, ds)
