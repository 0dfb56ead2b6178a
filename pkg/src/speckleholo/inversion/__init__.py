"""Abundance retrieval: NNLS unmixing and the two-stage estimator."""

from .estimator import (EstimatorParams, GradCheck, TrainConfig, TrainingSet, TrainResult, encode,
                        estimate, grad_check, init_params, loss_qt, loss_rep, map_descriptor,
                        numeric_gradient, qt_kink_rows, r2_score, softmax, softplus, train_stage1,
                        train_stage2)
from .nnls import (AbundanceEstimate, NNLSResult, UnmixProblem, kkt_violation, nnls_unmix,
                   solve_nnls)

__all__ = [
    "AbundanceEstimate", "EstimatorParams", "GradCheck", "NNLSResult", "TrainConfig",
    "TrainResult", "TrainingSet", "UnmixProblem", "encode", "estimate", "grad_check",
    "init_params", "kkt_violation", "loss_qt", "loss_rep", "map_descriptor", "nnls_unmix",
    "numeric_gradient", "qt_kink_rows", "r2_score", "softmax", "softplus", "solve_nnls",
    "train_stage1", "train_stage2",
]
