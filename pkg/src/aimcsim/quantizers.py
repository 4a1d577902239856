"""Quantization primitives for the analog linear layer.

Three quantizers share the same symmetric grid convention: the grid has
``L = 2^(bits-1) - 1`` positive levels per polarity, rounding is
ties-to-even (sign-symmetric and platform-reproducible).

* static input quantization with a learnable per-layer bound ``beta``,
* globally static output (ADC) quantization whose per-column bound is
  ``lambda_adc * beta_input * max|W_col|`` (round first, clamp second),
* per-output-channel round-to-nearest weight quantization for digital
  deployment.

"Per channel" throughout means per output channel, i.e. column ``i`` of a
weight matrix laid out ``W[in, out]`` with ``y = x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuantSpec",
    "InputRangeState",
    "quantize_input",
    "calibrate_or_update_range",
    "quantize_output",
    "rtn_quantize_weights",
]


@dataclass(frozen=True)
class QuantSpec:
    """Symmetric fixed-point grid with 2*levels + 1 points."""

    bits: int = 8

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")

    @property
    def levels(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass
class InputRangeState:
    """Learnable input bound with an EMA warm-up phase.

    For the first ``warmup_limit`` observed batches the bound tracks an
    exponential moving average of ``kappa * std(x)`` and receives no
    gradient updates. Afterwards it is trained: a straight-through
    boundary gradient (accumulated into ``pending_grad`` by the layer
    backward) plus a multiplicative decay that only fires when more than
    ``min_inside_fraction`` of the inputs lie strictly inside (-beta, beta).
    """

    beta: float = 0.0
    forward_count: int = 0
    warmup_limit: int = 500
    kappa: float = 15.0
    ema_decay: float = 0.1
    learn_decay: float = 0.01
    min_inside_fraction: float = 0.95
    frozen: bool = False
    pending_grad: float = field(default=0.0, repr=False)

    @property
    def calibrated(self) -> bool:
        return self.beta > 0.0

    @property
    def in_warmup(self) -> bool:
        return self.forward_count < self.warmup_limit

    def copy(self) -> "InputRangeState":
        return InputRangeState(
            beta=self.beta,
            forward_count=self.forward_count,
            warmup_limit=self.warmup_limit,
            kappa=self.kappa,
            ema_decay=self.ema_decay,
            learn_decay=self.learn_decay,
            min_inside_fraction=self.min_inside_fraction,
            frozen=self.frozen,
        )


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite entries")
    return x


def quantize_input(x: np.ndarray, state: InputRangeState, spec: QuantSpec) -> np.ndarray:
    """Clamp to [-beta, beta] and snap to the symmetric grid."""
    x = _check_finite(x, "input")
    if not state.calibrated:
        raise ValueError("input range is uncalibrated (beta <= 0); run calibration first")
    beta = state.beta
    step = beta / spec.levels
    clamped = np.clip(x, -beta, beta)
    return step * np.rint(clamped / step)


def calibrate_or_update_range(
    x_batch: np.ndarray,
    state: InputRangeState,
    grad_in: float | None = None,
    learning_rate: float = 0.0,
) -> InputRangeState:
    """Advance the input-range state machine by one observed batch.

    During warm-up the bound follows EMA(beta, kappa * std(batch)); the
    very first batch replaces beta outright. After warm-up, ``grad_in``
    (the accumulated straight-through boundary gradient) is applied with
    ``learning_rate`` and the multiplicative decay fires when the strict
    inside-fraction exceeds the configured threshold.
    """
    if state.frozen:
        raise RuntimeError("input range state is frozen; no further updates allowed")
    x_batch = _check_finite(x_batch, "calibration batch")
    if x_batch.size == 0:
        raise ValueError("calibration batch is empty")

    new = state.copy()
    new.forward_count = state.forward_count + 1

    if state.in_warmup:
        target = state.kappa * float(np.std(x_batch))
        if not state.calibrated:
            new.beta = target
        else:
            new.beta = (1.0 - state.ema_decay) * state.beta + state.ema_decay * target
        return new

    beta = state.beta
    if grad_in is not None and learning_rate != 0.0:
        beta = beta - learning_rate * grad_in
    inside = float(np.mean(np.abs(x_batch) < state.beta))
    if inside > state.min_inside_fraction:
        beta = beta * (1.0 - state.learn_decay)
    new.beta = beta
    return new


def output_bounds(w: np.ndarray, beta_inp: float, lambda_adc: float) -> np.ndarray:
    """Per-column ADC bound: lambda_adc * beta_inp * max|W_col|."""
    if lambda_adc <= 0:
        raise ValueError(f"lambda_adc must be positive, got {lambda_adc}")
    w = np.asarray(w, dtype=np.float64)
    return lambda_adc * beta_inp * np.abs(w).max(axis=0)


def quantize_output(
    y: np.ndarray,
    w: np.ndarray,
    beta_inp: float,
    lambda_adc: float,
    spec: QuantSpec,
) -> np.ndarray:
    """ADC output quantization: round to the grid first, clamp second.

    Columns of ``w`` whose max|.| is zero carry no current, so their
    outputs are forced to zero.
    """
    y = _check_finite(y, "pre-activation output")
    bounds = output_bounds(w, beta_inp, lambda_adc)
    y2 = np.atleast_2d(y)
    if y2.shape[-1] != bounds.shape[0]:
        raise ValueError(f"output width {y2.shape[-1]} != number of weight columns {bounds.shape[0]}")

    out = np.zeros_like(y2)
    nz = bounds > 0
    if nz.any():
        step = bounds[nz] / spec.levels
        rounded = step * np.rint(y2[..., nz] / step)
        out[..., nz] = np.clip(rounded, -bounds[nz], bounds[nz])
    return out.reshape(np.shape(y))


def rtn_quantize_weights(w: np.ndarray, bits: int) -> np.ndarray:
    """Per-output-channel round-to-nearest weight quantization.

    scale_i = max|W_col_i| / L; zero columns map to zero columns.
    """
    spec = QuantSpec(bits)
    w = np.asarray(w, dtype=np.float64)
    max_abs = np.abs(w).max(axis=0)
    scale = np.where(max_abs > 0, max_abs / spec.levels, 1.0)
    q = scale * np.rint(w / scale)
    q[:, max_abs == 0] = 0.0
    return q
