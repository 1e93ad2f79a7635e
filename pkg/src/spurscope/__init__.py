"""Spurious-feature analysis for small image classifiers."""

from .attribution import SScoreReport, binarize, gradcam, neuron_sscore, sscore_report
from .data import Dataset, SpuriousDatasetSpec, build_balanced_testset, generate_dataset
from .models import SmallCnnConfig, SmallVitConfig, build_model, encode, load_model, save_model
from .tensor import ContractError, Tape, Tensor
from .train import TrainConfig, evaluate_groups, train

__version__ = "0.1.0"
