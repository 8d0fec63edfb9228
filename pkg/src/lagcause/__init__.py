"""Lagged causal discovery through forecasting models and gradient attribution."""

__version__ = "0.1.0"

from .graphs import LaggedGraph
from .sim import (MechanismSpec, NoiseSpec, RegimeSchedule, TimeSeriesDataset,
                  add_latents, build_mechanisms, sample_graph, simulate)
from .autodiff import BackwardMode, EXACT, Tape, Tensor, lrp_epsilon
from .model import ModelConfig, NetworkPredictor, PredictorModel, TrainConfig, new_model
from .train import train
from .attribution import (AttributionTensor, TopKGlobal, TopKRow, UniformThreshold,
                          aggregate, attribute_sample, binarize, intervention_effect,
                          rank_stats, raw_attention_scores)
from .baselines import (GrangerConfig, multivariate_granger, pairwise_granger,
                        random_guess, var_coefficient_oracle)
from .metrics import MetricsReport, regime_metrics, score_metrics, structural_metrics

__all__ = [
    "LaggedGraph", "MechanismSpec", "NoiseSpec", "RegimeSchedule", "TimeSeriesDataset",
    "add_latents", "build_mechanisms", "sample_graph", "simulate",
    "BackwardMode", "EXACT", "Tape", "Tensor", "lrp_epsilon",
    "ModelConfig", "NetworkPredictor", "PredictorModel", "TrainConfig", "new_model",
    "train",
    "AttributionTensor", "TopKGlobal", "TopKRow", "UniformThreshold",
    "aggregate", "attribute_sample", "binarize", "intervention_effect",
    "rank_stats", "raw_attention_scores",
    "GrangerConfig", "multivariate_granger", "pairwise_granger",
    "random_guess", "var_coefficient_oracle",
    "MetricsReport", "regime_metrics", "score_metrics", "structural_metrics",
]
