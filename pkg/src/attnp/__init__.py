"""Adversarial training on attention scores for BiLSTM attention classifiers."""

from ._kernels import BACKEND
from .adversary import METHODS, AdvConfig, adversarial_loss, adversarial_objective
from .data import Instance, Vocabulary, build_vocab, generate_babi_like, load_dataset, tokenize
from .evaluator import EvalReport, evaluate, gradient_importance, pearson_correlation, task_metric
from .model import ModelConfig, ModelParameters, forward, init_params, make_batch
from .trainer import TrainConfig, TrainHistory, epsilon_sweep, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "METHODS", "AdvConfig", "EvalReport", "Instance", "ModelConfig",
    "ModelParameters", "TrainConfig", "TrainHistory", "Vocabulary", "adversarial_loss",
    "adversarial_objective", "build_vocab", "epsilon_sweep", "evaluate", "forward",
    "generate_babi_like", "gradient_importance", "init_params", "load_dataset", "make_batch",
    "pearson_correlation", "task_metric", "tokenize", "train",
]
