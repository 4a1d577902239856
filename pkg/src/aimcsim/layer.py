"""The composite analog linear layer.

Forward: input quantization -> weight perturbation -> (tiled) MVM with
exact float64 aggregation of partial sums -> output quantization.
Backward: straight-through estimation against the noise-free weights;
quantizers act as identity inside the clamp interval, zero outside the
input clamp. Weight layout is W[in, out] with y = x @ W, so "channel i"
is column i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionError
from .noise import DriftSpec, PcmNoiseSpec, TrainNoiseSpec, apply_drift_and_read, inject_train_noise, program_pcm
from .quantizers import InputRangeState, QuantSpec, quantize_input, quantize_output, rtn_quantize_weights
from .streams import RngStream

__all__ = ["AnalogLayerConfig", "Deployment", "ForwardCache", "forward", "backward", "clip_weights", "deploy"]


@dataclass
class AnalogLayerConfig:
    """All per-layer nonideality knobs."""

    in_features: int
    out_features: int
    input_bits: int = 8
    output_bits: int = 8
    lambda_adc: float = 12.0
    train_noise: TrainNoiseSpec = field(default_factory=lambda: TrainNoiseSpec(0.0, 0.0))
    clip_alpha: float = 3.0
    tile_size: int | None = None
    input_quant_enabled: bool = False
    output_quant_enabled: bool = False
    qat_weight_bits: int | None = None  # set => RTN weight quantization in forward (QAT baseline)
    input_range: InputRangeState = field(default_factory=InputRangeState)

    def __post_init__(self):
        if self.clip_alpha <= 0:
            raise ValueError("clip_alpha must be positive")
        if self.tile_size is not None and self.tile_size > max(self.in_features, self.out_features):
            raise ValueError("tile_size exceeds both matrix dimensions")

    @property
    def noise_mapping(self) -> str:
        return "per-tile" if self.tile_size else "per-channel"


@dataclass
class Deployment:
    """Frozen programmed (and, if configured, drifted) weights.

    Programming noise and the drift exponents are drawn once at deploy
    time and frozen; only read noise is dynamic, redrawn per forward from
    a counter-derived stream. Shareable across parallel evaluation seeds.
    """

    programmed: np.ndarray
    drifted: np.ndarray
    read_noise_coeff: float = 0.0
    master_seed: int = 0
    stream_id: int = 0
    _read_count: int = field(default=0, repr=False)

    def read_weights(self) -> np.ndarray:
        """Weights as seen by one inference pass."""
        if self.read_noise_coeff <= 0:
            return self.drifted
        stream = RngStream(self.master_seed, self.stream_id ^ (0x9E3779B97F4A7C15 + self._read_count))
        self._read_count += 1
        read = stream.standard_normal(self.drifted.shape) * (self.read_noise_coeff * np.abs(self.drifted))
        return self.drifted + read


@dataclass
class ForwardCache:
    x_quant: np.ndarray
    w_clean: np.ndarray
    inside_mask: np.ndarray
    layer: AnalogLayerConfig


def _tile_bounds(n: int, size: int) -> list[tuple[int, int]]:
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _tiled_matmul(x: np.ndarray, w: np.ndarray, tile: int) -> np.ndarray:
    """MVM split into tile x tile blocks, partial sums aggregated exactly."""
    y = np.zeros((x.shape[0], w.shape[1]))
    for r0, r1 in _tile_bounds(w.shape[0], tile):
        for c0, c1 in _tile_bounds(w.shape[1], tile):
            y[:, c0:c1] += x[:, r0:r1] @ w[r0:r1, c0:c1]
    return y


def forward(
    x: np.ndarray,
    layer: AnalogLayerConfig,
    w: np.ndarray,
    mode: str = "train",
    noise_ctx: Deployment | None = None,
    stream: RngStream | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the analog forward pass; returns (y, cache for backward)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"input width {x.shape[1]} != in_features {w.shape[0]}")

    if layer.input_quant_enabled:
        if not layer.input_range.calibrated:
            raise RuntimeError("eval with unconfigured input range" if mode == "eval" else "input range not calibrated")
        beta = layer.input_range.beta
        xq = quantize_input(x, layer.input_range, QuantSpec(layer.input_bits))
        inside = np.abs(x) <= beta
    else:
        xq = x
        inside = np.ones_like(x, dtype=bool)

    if mode == "train":
        if layer.qat_weight_bits is not None:
            w_used = rtn_quantize_weights(w, layer.qat_weight_bits)
        elif not layer.train_noise.is_identity:
            if stream is None:
                raise ValueError("train-mode noise injection requires a stream")
            w_used = inject_train_noise(w, layer.train_noise, stream)
        else:
            w_used = w
    elif mode == "eval":
        if noise_ctx is not None:
            w_used = noise_ctx.read_weights()
        elif layer.qat_weight_bits is not None:
            w_used = rtn_quantize_weights(w, layer.qat_weight_bits)
        else:
            w_used = w
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if layer.tile_size:
        y = _tiled_matmul(xq, w_used, layer.tile_size)
    else:
        y = xq @ w_used

    if layer.output_quant_enabled:
        beta_inp = layer.input_range.beta if layer.input_quant_enabled else 1.0
        y = quantize_output(y, w_used, beta_inp, layer.lambda_adc, QuantSpec(layer.output_bits))

    return y, ForwardCache(x_quant=xq, w_clean=w.copy(), inside_mask=inside, layer=layer)


def backward(grad_y: np.ndarray, cache: ForwardCache) -> tuple[np.ndarray, np.ndarray, float]:
    """Straight-through backward pass; returns (grad_x, grad_w, grad_beta).

    Noise-free weights from the cache are used throughout. The output
    quantizer is a pure pass-through; the input quantizer passes
    gradients inside the clamp and zeroes them outside, pushing the
    boundary contribution (sign-matched) into grad_beta.
    """
    grad_y = np.atleast_2d(np.asarray(grad_y, dtype=np.float64))
    if grad_y.shape != (cache.x_quant.shape[0], cache.w_clean.shape[1]):
        raise ValueError("grad_y shape does not match the cached forward")

    grad_xq = grad_y @ cache.w_clean.T
    grad_x = np.where(cache.inside_mask, grad_xq, 0.0)
    grad_w = cache.x_quant.T @ grad_y
    clipped = ~cache.inside_mask
    grad_beta = float(np.sum(grad_xq[clipped] * np.sign(cache.x_quant[clipped]))) if clipped.any() else 0.0
    return grad_x, grad_w, grad_beta


def clip_weights(w: np.ndarray, alpha: float) -> np.ndarray:
    """Clamp each column to +/- alpha * population-std of the pre-clip column."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    w = np.asarray(w, dtype=np.float64)
    zeta = alpha * w.std(axis=0)
    return np.clip(w, -zeta[None, :], zeta[None, :])


def deploy(
    w: np.ndarray,
    layer: AnalogLayerConfig,
    model: PcmNoiseSpec | TrainNoiseSpec,
    stream: RngStream,
    drift: DriftSpec | None = None,
) -> Deployment:
    """Program the trained weights once and freeze the result."""
    w = np.asarray(w, dtype=np.float64)
    if isinstance(model, PcmNoiseSpec):
        programmed = program_pcm(w, model, stream, mapping=layer.noise_mapping, tile_size=layer.tile_size)
    elif isinstance(model, TrainNoiseSpec):
        programmed = inject_train_noise(w, model, stream)
    else:
        raise TypeError(f"unsupported deployment noise model: {type(model).__name__}")

    drifted = programmed
    read_coeff = 0.0
    if drift is not None:
        static = DriftSpec(t0=drift.t0, t_eval=drift.t_eval, nu_mean=drift.nu_mean,
                           nu_std=drift.nu_std, read_noise_coeff=0.0)
        drifted = apply_drift_and_read(programmed, static, stream.split("drift"))
        read_coeff = drift.read_noise_coeff
    return Deployment(programmed=programmed, drifted=drifted, read_noise_coeff=read_coeff,
                      master_seed=stream.master_seed, stream_id=stream.stream_id)
