"""Reusable builders for the desk-scale experiments: the Gaussian-cluster
classification task with an analytic teacher, mode-matched student
construction, and paired robustness comparisons."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .harness import ClassificationTask, EvalReport, eval_noisy
from .layer import AnalogLayerConfig
from .models import AnalogLinear, MlpClassifier, make_cluster_teacher, sample_cluster_batch
from .noise import DriftSpec, PcmNoiseSpec, TrainNoiseSpec
from .quantizers import InputRangeState
from .streams import RngStream
from .training import TrainConfig, TrainResult, train

__all__ = ["ClusterSpec", "build_cluster_experiment", "student_from_teacher", "train_cluster_student"]


@dataclass(frozen=True)
class ClusterSpec:
    n_features: int = 16
    n_classes: int = 4
    sample_noise_std: float = 0.15
    hidden_gain: float = 4.0
    outlier_scale: float = 6.0
    train_samples: int = 4096
    eval_samples: int = 1024
    # student nonideality knobs
    gamma_weight: float = 0.02
    clip_alpha: float = 3.0
    input_bits: int = 8
    output_bits: int = 8
    lambda_adc: float = 2.0
    kappa: float = 15.0
    warmup_limit: int = 500


def build_cluster_experiment(spec: ClusterSpec, master_seed: int):
    """Teacher, training inputs, and a held-out evaluation task."""
    root = RngStream(master_seed)
    teacher, centers = make_cluster_teacher(
        spec.n_features, spec.n_classes, root.split("teacher"),
        hidden_gain=spec.hidden_gain, outlier_scale=spec.outlier_scale)
    train_x, _ = sample_cluster_batch(centers, spec.train_samples, root.split("train-data"),
                                      noise_std=spec.sample_noise_std)
    eval_x, eval_y = sample_cluster_batch(centers, spec.eval_samples, root.split("eval-data"),
                                          noise_std=spec.sample_noise_std)
    return teacher, centers, train_x, ClassificationTask(eval_x, eval_y)


def student_from_teacher(teacher, spec: ClusterSpec):
    """Teacher copy wearing the full hardware configuration.

    Works for any model built from analog layers; digital parameters are
    deep-copied alongside the weights.
    """
    layers = []
    for lin in teacher.analog:
        cfg = replace(
            lin.config,
            train_noise=TrainNoiseSpec(gamma_weight=spec.gamma_weight, beta_weight=0.0),
            clip_alpha=spec.clip_alpha,
            input_bits=spec.input_bits,
            output_bits=spec.output_bits,
            lambda_adc=spec.lambda_adc,
            input_quant_enabled=True,
            output_quant_enabled=True,
            qat_weight_bits=None,
            input_range=InputRangeState(kappa=spec.kappa, warmup_limit=spec.warmup_limit),
        )
        layers.append(AnalogLinear(cfg, lin.weight.copy()))
    if isinstance(teacher, MlpClassifier):
        return MlpClassifier(layers)
    from .models import TinyTransformer

    return TinyTransformer(layers, teacher.digital["embed"].copy(), teacher.digital["pos"].copy())


def train_cluster_student(
    teacher: MlpClassifier,
    train_x: np.ndarray,
    spec: ClusterSpec,
    cfg: TrainConfig,
    master_seed: int,
) -> TrainResult:
    student = student_from_teacher(teacher, spec)
    return train(student, teacher, train_x, cfg, RngStream(master_seed).split("train"))
