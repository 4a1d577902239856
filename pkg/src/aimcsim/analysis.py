"""Weight-statistics analyses: per-layer SNR under the programming-noise
model, round-to-nearest quantization error, and distribution shape
diagnostics (kurtosis, divergence from uniform)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise import PcmNoiseSpec, normalized_conductance, pcm_sigma_pct
from .quantizers import rtn_quantize_weights

__all__ = [
    "AnalysisError",
    "LayerReport",
    "SNR_FLOOR_DB",
    "snr_db",
    "snr_profile",
    "layer_mean_snr",
    "rtn_error_report",
    "distribution_report",
    "layer_report",
]

# contribution of zero (no-signal) weights to the mean SNR
SNR_FLOOR_DB = -40.0

DEFAULT_HISTOGRAM_BINS = 201  # odd count centers a bin at zero


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class LayerReport:
    layer_id: int
    mean_snr_db: float
    mean_abs_quant_error: float
    kurtosis: float
    kl_to_uniform: float

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "mean_snr_db": self.mean_snr_db,
            "mean_abs_quant_error": self.mean_abs_quant_error,
            "kurtosis": self.kurtosis,
            "kl_to_uniform": self.kl_to_uniform,
        }


def snr_db(g, spec: PcmNoiseSpec, floor_db: float = SNR_FLOOR_DB) -> np.ndarray:
    """SNR in dB at normalized conductance g, floored where the signal is zero."""
    g = np.asarray(g, dtype=np.float64)
    sigma = pcm_sigma_pct(g, spec)
    with np.errstate(divide="ignore"):
        out = 20.0 * np.log10(np.where(g > 0, g, 1.0) / sigma)
    return np.maximum(np.where(g > 0, out, floor_db), floor_db)


def snr_profile(spec: PcmNoiseSpec, floor_db: float = SNR_FLOOR_DB):
    """The map g in [0, 100] -> SNR dB as a callable."""
    return lambda g: snr_db(g, spec, floor_db)


def layer_mean_snr(
    w: np.ndarray,
    spec: PcmNoiseSpec,
    mapping: str = "per-channel",
    tile_size: int | None = None,
    floor_db: float = SNR_FLOOR_DB,
) -> float:
    """Mean over all weights of their programming-noise SNR in dB."""
    w = np.asarray(w, dtype=np.float64)
    if not np.abs(w).max() > 0:
        raise AnalysisError("all-zero matrix has no signal")
    g, _ = normalized_conductance(w, mapping, tile_size)
    return float(np.mean(snr_db(g, spec, floor_db)))


def rtn_error_report(w: np.ndarray, bits: int) -> float:
    """Mean absolute per-channel round-to-nearest quantization error."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.mean(np.abs(w - rtn_quantize_weights(w, bits))))


def distribution_report(w: np.ndarray, histogram_bins: int = DEFAULT_HISTOGRAM_BINS) -> dict:
    """Pearson kurtosis and KL divergence from the empirical histogram to
    the uniform density on [-max|w|, max|w|]."""
    v = np.asarray(w, dtype=np.float64).ravel()
    if np.unique(v).size < 2:
        raise AnalysisError("need at least two distinct values")
    mu = v.mean()
    sigma2 = v.var()
    kurtosis = float(np.mean((v - mu) ** 4) / sigma2**2)

    bound = np.abs(v).max()
    counts, _ = np.histogram(v, bins=histogram_bins, range=(-bound, bound))
    p = counts / counts.sum()
    u = 1.0 / histogram_bins
    nz = p > 0
    kl = float(np.sum(p[nz] * np.log(p[nz] / u)))
    return {"kurtosis": kurtosis, "kl_to_uniform": kl}


def layer_report(layer_id: int, w: np.ndarray, spec: PcmNoiseSpec, bits: int = 4,
                 mapping: str = "per-channel", tile_size: int | None = None) -> LayerReport:
    shape = distribution_report(w)
    return LayerReport(
        layer_id=layer_id,
        mean_snr_db=layer_mean_snr(w, spec, mapping, tile_size),
        mean_abs_quant_error=rtn_error_report(w, bits),
        kurtosis=shape["kurtosis"],
        kl_to_uniform=shape["kl_to_uniform"],
    )
