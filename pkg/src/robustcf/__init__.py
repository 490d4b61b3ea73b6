"""Robust counterfactual explanations for gradient-boosted tree ensembles."""

from ._backend import BACKEND
from .data import Dataset, ScenarioSpec, make_scenarios, split
from .ensemble import TrainConfig, TreeEnsemble, flip_model, load_model, save_model, train
from .generators import CounterfactualResult, GeneratorConfig, make_generator
from .metrics import LofIndex, LofParams, cantelli_bound, validity
from .robx import ConservativeIndex, RobXConfig, conservative_counterfactual, robx
from .stability import StabilityParams, stability, stability_test

__all__ = [
    "BACKEND", "Dataset", "ScenarioSpec", "make_scenarios", "split",
    "TrainConfig", "TreeEnsemble", "flip_model", "load_model", "save_model", "train",
    "CounterfactualResult", "GeneratorConfig", "make_generator",
    "LofIndex", "LofParams", "cantelli_bound", "validity",
    "ConservativeIndex", "RobXConfig", "conservative_counterfactual", "robx",
    "StabilityParams", "stability", "stability_test",
]
