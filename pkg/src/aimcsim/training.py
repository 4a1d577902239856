"""Hardware-aware distillation training at desk scale.

The student starts as an exact copy of the teacher and is trained on a
pure distillation loss. Three modes:
  hwa           quantizers + weight-noise injection in the forward pass,
                weight clipping after every optimizer step
  qat-baseline  round-to-nearest weight quantization in the forward pass
                (straight-through backward), no noise, no clipping
  plain         no nonidealities anywhere
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import log_softmax, softmax

from .datagen import SequenceDataset
from .layer import AnalogLayerConfig, clip_weights
from .models import BOS_TOKEN, ModelGrads
from .noise import TrainNoiseSpec
from .quantizers import calibrate_or_update_range
from .streams import RngStream

__all__ = ["TrainConfig", "TrainResult", "TrainingDivergence", "AdamW", "distill_loss", "train", "effective_configs"]

MODES = ("hwa", "qat-baseline", "plain")


class TrainingDivergence(RuntimeError):
    """Raised when the loss leaves the finite range."""


@dataclass
class TrainConfig:
    mode: str = "hwa"
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    warmup_ratio: float = 0.016
    distill_temperature: float = 2.0
    distill_beta: float = 1.0
    qat_bits: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.distill_temperature <= 0:
            raise ValueError("distill_temperature must be positive")
        if self.distill_beta != 1.0:
            raise ValueError("only pure distillation (distill_beta = 1.0) is supported")


@dataclass
class TrainResult:
    model: object
    loss_trace: np.ndarray
    steps: int


def distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float):
    """KL(teacher_softened || student_softened) * T^2, averaged over rows.

    Returns (loss, gradient wrt student logits). Rows are positions; any
    leading shape is flattened.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"logit shapes differ: {s.shape} vs {t.shape}")
    if not (np.isfinite(s).all() and np.isfinite(t).all()):
        raise ValueError("non-finite logits")
    shape = s.shape
    s2 = s.reshape(-1, shape[-1])
    t2 = t.reshape(-1, shape[-1])
    n = s2.shape[0]
    temp = float(temperature)

    p = softmax(t2 / temp, axis=1)
    log_p = log_softmax(t2 / temp, axis=1)
    log_q = log_softmax(s2 / temp, axis=1)
    loss = float(np.sum(p * (log_p - log_q)) / n * temp**2)
    grad = (softmax(s2 / temp, axis=1) - p) * temp / n
    return loss, grad.reshape(shape)


class AdamW:
    """Decoupled weight decay; bias-corrected moments."""

    def __init__(self, beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=0.01):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            p -= lr * self.weight_decay * p
            p -= lr * (self.m[key] / bc1) / (np.sqrt(self.v[key] / bc2) + self.eps)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup then linear (power-1 polynomial) decay to zero."""
    warmup = max(1, int(round(warmup_ratio * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup)


def clip_grads(grads: ModelGrads, max_norm: float) -> ModelGrads:
    total = sum(float(np.sum(g * g)) for g in grads.weights)
    total += sum(float(np.sum(g * g)) for g in grads.digital.values())
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return ModelGrads(
        weights=[g * scale for g in grads.weights],
        betas=[b * scale for b in grads.betas],
        digital={k: g * scale for k, g in grads.digital.items()},
    )


def effective_configs(model, cfg: TrainConfig) -> list[AnalogLayerConfig]:
    """Per-layer configs as seen by the training-mode forward pass."""
    out = []
    for lin in model.analog:
        base = lin.config
        if cfg.mode == "hwa":
            out.append(replace(base, qat_weight_bits=None))
        elif cfg.mode == "qat-baseline":
            out.append(replace(base, train_noise=TrainNoiseSpec(0.0, 0.0),
                               input_quant_enabled=False, output_quant_enabled=False,
                               qat_weight_bits=cfg.qat_bits))
        else:
            out.append(replace(base, train_noise=TrainNoiseSpec(0.0, 0.0),
                               input_quant_enabled=False, output_quant_enabled=False,
                               qat_weight_bits=None))
    return out


def _model_inputs(data) -> np.ndarray:
    """Training inputs: feature rows for the MLP, shifted token rows otherwise."""
    if isinstance(data, SequenceDataset):
        tokens = data.tokens.astype(np.int64)
        bos = np.full((tokens.shape[0], 1), BOS_TOKEN, dtype=np.int64)
        return np.hstack([bos, tokens[:, :-1]])
    return np.asarray(data, dtype=np.float64)


def _named(model) -> dict[str, np.ndarray]:
    params = {f"w{i}": lin.weight for i, lin in enumerate(model.analog)}
    params.update(model.digital)
    return params


def _named_grads(model, grads: ModelGrads) -> dict[str, np.ndarray]:
    out = {f"w{i}": g for i, g in enumerate(grads.weights)}
    out.update(grads.digital)
    return out


def train(student, teacher, data, cfg: TrainConfig, stream: RngStream, on_step=None) -> TrainResult:
    """Distill ``teacher`` into ``student`` in place; returns the loss trace.

    ``on_step(step, student, pre_clip_stds)`` fires after each optimizer
    step (post clipping); pre_clip_stds holds each analog layer's
    per-column std as measured just before the clip.
    """
    inputs = _model_inputs(data)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    batches_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    configs = effective_configs(student, cfg)
    trace = np.zeros(total_steps)

    step = 0
    for epoch in range(cfg.epochs):
        order = stream.split("shuffle", repetition=epoch).permutation(n)
        for b in range(batches_per_epoch):
            batch = inputs[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_ratio)
            noise_stream = stream.split("step-noise", repetition=step)

            teacher_logits, _ = teacher.forward(batch, mode="eval",
                                                configs=effective_configs(teacher, TrainConfig(mode="plain")))
            try:
                student_logits, cache = student.forward(batch, mode="train", noise_stream=noise_stream,
                                                        configs=configs, update_ranges=True)
            except ValueError as e:
                if "non-finite" in str(e):
                    raise TrainingDivergence(f"forward pass diverged at step {step}: {e}") from e
                raise
            if not np.isfinite(student_logits).all():
                raise TrainingDivergence(f"student logits diverged at step {step}")
            loss, grad_logits = distill_loss(student_logits, teacher_logits, cfg.distill_temperature)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"loss diverged at step {step}: {loss}")
            trace[step] = loss

            grads = clip_grads(student.backward(grad_logits, cache), cfg.max_grad_norm)
            opt.step(_named(student), _named_grads(student, grads), lr)

            pre_clip_stds = None
            if cfg.mode == "hwa":
                pre_clip_stds = [lin.weight.std(axis=0) for lin in student.analog]
                for i, lin in enumerate(student.analog):
                    lin.weight[...] = clip_weights(lin.weight, lin.config.clip_alpha)
                    state = lin.config.input_range
                    if lin.config.input_quant_enabled and not state.in_warmup and not state.frozen:
                        lin.config.input_range = calibrate_or_update_range(
                            cache["raw_inputs"][i], state, grad_in=grads.betas[i], learning_rate=lr)
            if on_step is not None:
                on_step(step, student, pre_clip_stds)
            step += 1

    return TrainResult(model=student, loss_trace=trace, steps=total_steps)
