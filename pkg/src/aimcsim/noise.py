"""Weight perturbation processes.

Three families:

* training-time Gaussian injection, scaled per output channel by
  ``gamma * max|W_col| + beta * |W|`` (additive / multiplicative / affine),
* a PCM programming-noise model: a third-degree polynomial in the
  normalized conductance g (percent of channel max) gives the noise std
  in percent of channel max, optionally scaled for stress tests,
* a drift + read-noise process for time-point evaluations: power-law
  conductance decay with per-element Gaussian exponent, plus proportional
  read noise redrawn on every read.

Programming noise is drawn once per deployment and frozen; read noise is
dynamic. The harness enforces that split.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .streams import RngStream

__all__ = [
    "TrainNoiseSpec",
    "PcmNoiseSpec",
    "DriftSpec",
    "inject_train_noise",
    "pcm_sigma_pct",
    "program_pcm",
    "apply_drift_and_read",
    "sweep_magnitudes",
]

#: conductance-mapping granularities for normalizing weights to percent units
MAPPINGS = ("per-channel", "per-tile", "per-layer")


@dataclass(frozen=True)
class TrainNoiseSpec:
    """Gaussian weight-noise injection coefficients.

    gamma_weight scales per-channel max (additive part), beta_weight
    scales |w| (multiplicative part). (0, 0) is the identity.
    """

    gamma_weight: float = 0.02
    beta_weight: float = 0.0

    def __post_init__(self):
        if self.gamma_weight < 0 or self.beta_weight < 0:
            raise ValueError("noise coefficients must be nonnegative")

    @property
    def is_identity(self) -> bool:
        return self.gamma_weight == 0.0 and self.beta_weight == 0.0


@dataclass(frozen=True)
class PcmNoiseSpec:
    """Programming-noise polynomial in percent-of-channel-max units.

    sigma_pct(g) = scale_factor * (c3 g^3 + c2 g^2 + c1 g + c0) for
    g in [0, 100]; scale_factor stresses the magnitude only.
    """

    c3: float = 1.23e-5
    c2: float = -3.06e-3
    c1: float = 2.45e-1
    c0: float = 2.11
    scale_factor: float = 1.0

    def __post_init__(self):
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")

    def scaled(self, factor: float) -> "PcmNoiseSpec":
        return replace(self, scale_factor=self.scale_factor * factor)


@dataclass(frozen=True)
class DriftSpec:
    """Power-law conductance drift plus proportional read noise.

    Magnitudes decay as (t_eval / t0)^(-nu) with nu ~ N(nu_mean, nu_std^2)
    clamped at zero per element; read noise has std read_noise_coeff * |w|
    and is redrawn on every read.
    """

    t0: float = 25.0
    t_eval: float = 25.0
    nu_mean: float = 0.05
    nu_std: float = 0.01
    read_noise_coeff: float = 0.0

    def __post_init__(self):
        if self.t_eval < self.t0:
            raise ValueError(f"t_eval ({self.t_eval}) must be >= t0 ({self.t0})")


def _column_max(w: np.ndarray) -> np.ndarray:
    return np.abs(w).max(axis=0)


def inject_train_noise(w: np.ndarray, spec: TrainNoiseSpec, stream: RngStream) -> np.ndarray:
    """W + (gamma * max|W_col| + beta * |W|) * tau, tau ~ N(0, 1) elementwise."""
    w = np.asarray(w, dtype=np.float64)
    if spec.is_identity:
        return w.copy()
    sigma = spec.gamma_weight * _column_max(w)[None, :] + spec.beta_weight * np.abs(w)
    tau = stream.standard_normal(w.shape)
    return w + sigma * tau


def pcm_sigma_pct(g, spec: PcmNoiseSpec) -> np.ndarray:
    """Noise std in percent of channel max for normalized conductance g in [0, 100]."""
    g = np.asarray(g, dtype=np.float64)
    poly = ((spec.c3 * g + spec.c2) * g + spec.c1) * g + spec.c0
    return spec.scale_factor * poly


def normalized_conductance(w: np.ndarray, mapping: str = "per-channel", tile_size: int | None = None):
    """Map weights to percent-of-max units g in [0, 100].

    Returns (g, ref) where ref broadcasts against w and holds the
    normalization magnitude (channel max, tile-column max, or layer max).
    Zero-reference entries get g = 0.
    """
    w = np.asarray(w, dtype=np.float64)
    if mapping == "per-channel":
        ref = np.broadcast_to(_column_max(w)[None, :], w.shape)
    elif mapping == "per-layer":
        ref = np.full_like(w, np.abs(w).max())
    elif mapping == "per-tile":
        if tile_size is None:
            raise ValueError("per-tile mapping requires tile_size")
        ref = np.empty_like(w)
        for r0 in range(0, w.shape[0], tile_size):
            for c0 in range(0, w.shape[1], tile_size):
                tile = w[r0 : r0 + tile_size, c0 : c0 + tile_size]
                ref[r0 : r0 + tile_size, c0 : c0 + tile_size] = np.abs(tile).max(axis=0)[None, :]
    else:
        raise ValueError(f"unknown mapping {mapping!r}; expected one of {MAPPINGS}")
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(ref > 0, 100.0 * np.abs(w) / ref, 0.0)
    return g, ref


def program_pcm(
    w: np.ndarray,
    spec: PcmNoiseSpec,
    stream: RngStream,
    mapping: str = "per-channel",
    tile_size: int | None = None,
) -> np.ndarray:
    """Draw frozen programming noise: W + eta, eta ~ N(0, sigma(g)^2).

    sigma is evaluated on |w| normalized to percent of the mapping
    reference and converted back to weight units. Columns (or tiles)
    that are entirely zero stay zero.
    """
    w = np.asarray(w, dtype=np.float64)
    g, ref = normalized_conductance(w, mapping, tile_size)
    sigma = pcm_sigma_pct(g, spec) * ref / 100.0
    eta = stream.standard_normal(w.shape)
    return w + sigma * eta


def apply_drift_and_read(w_programmed: np.ndarray, spec: DriftSpec, stream: RngStream) -> np.ndarray:
    """Shrink magnitudes by the drift power law, then add proportional read noise."""
    w = np.asarray(w_programmed, dtype=np.float64)
    nu = np.maximum(stream.gaussian(w.shape, spec.nu_mean, spec.nu_std), 0.0)
    drifted = w * (spec.t_eval / spec.t0) ** (-nu)
    if spec.read_noise_coeff > 0:
        read = stream.standard_normal(w.shape) * (spec.read_noise_coeff * np.abs(drifted))
        drifted = drifted + read
    return drifted


def sweep_magnitudes(base: TrainNoiseSpec, gammas) -> list[TrainNoiseSpec]:
    """One spec per gamma, carrying the base multiplicative coefficient."""
    return [TrainNoiseSpec(gamma_weight=float(g), beta_weight=base.beta_weight) for g in gammas]
