"""Thin host bindings for the analog in-memory computing kernel.

Exposes layer construction, forward/backward, deployment plus noisy
evaluation, and analysis reports through explicit handles. Every bound
operation produces bit-identical results to calling the kernel directly
with the same stream; handles own their configuration and weights and
never alias each other unless cloned.

Host arrays are passed zero-copy when they are already C-contiguous
float64; other layouts are copied with a warning. Handles are not
thread-safe; guard them externally if shared. All numeric work happens
inside NumPy kernels, which drop the interpreter lock for the duration
of the computation.
"""

from __future__ import annotations

import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from aimcsim.checkpoint import load_checkpoint
from aimcsim.harness import ClassificationTask, eval_noisy
from aimcsim.layer import AnalogLayerConfig, ForwardCache, backward, deploy, forward
from aimcsim.noise import DriftSpec, PcmNoiseSpec, TrainNoiseSpec
from aimcsim.streams import RngStream

__all__ = [
    "BindingError",
    "BoundLayerHandle",
    "BoundModelHandle",
    "open_layer",
    "open_model",
    "bind_forward",
    "bind_backward",
    "bind_deploy_and_eval",
]

__version__ = "0.1.0"

_KERNEL_API = "0.1"  # aimcsim series this binding layer is built against


class BindingError(ValueError):
    """Raised for misuse of the binding layer: closed handles, shape or
    dtype mismatches, invalid noise specifications."""


def _as_host_array(x, expected_cols: int, what: str) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim not in (1, 2) or a.shape[-1] != expected_cols:
        raise BindingError(
            f"{what} shape mismatch: expected (*, {expected_cols}), got {a.shape}"
        )
    if a.dtype != np.float64:
        raise BindingError(f"{what} dtype mismatch: expected float64, got {a.dtype}")
    if not a.flags["C_CONTIGUOUS"]:
        warnings.warn(f"{what} is not C-contiguous; copying", stacklevel=3)
        a = np.ascontiguousarray(a)
    return a


class BoundLayerHandle:
    """Owned reference to one analog layer (configuration + weights).

    The handle deep-copies its inputs on construction, so no two handles
    alias unless produced by :meth:`clone`, and closing one is always
    safe. Usable as a context manager.
    """

    def __init__(self, config: AnalogLayerConfig, weight, layer_index: int = 0):
        weight = np.array(weight, dtype=np.float64)
        if weight.shape != (config.in_features, config.out_features):
            raise BindingError(
                f"weight shape mismatch: expected "
                f"({config.in_features}, {config.out_features}), got {weight.shape}"
            )
        self._config = replace(config, input_range=config.input_range.copy())
        self._weight = weight
        self._cache: ForwardCache | None = None
        self._closed = False
        self.layer_index = layer_index

    @property
    def in_features(self) -> int:
        return self._config.in_features

    @property
    def out_features(self) -> int:
        return self._config.out_features

    @property
    def dtype(self) -> np.dtype:
        return self._weight.dtype

    @property
    def shape(self) -> tuple[int, int]:
        return self._weight.shape

    @property
    def closed(self) -> bool:
        return self._closed

    def weights(self) -> np.ndarray:
        self._require_open()
        return self._weight.copy()

    def clone(self) -> "BoundLayerHandle":
        self._require_open()
        return BoundLayerHandle(self._config, self._weight, self.layer_index)

    def close(self) -> None:
        self._closed = True
        self._cache = None
        self._weight = np.empty((0, 0))

    def __enter__(self) -> "BoundLayerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _require_open(self) -> None:
        if self._closed:
            raise BindingError("operation on a closed handle")


class BoundModelHandle:
    """Owned reference to a whole checkpointed model, for evaluation
    parity with the command-line `eval` path."""

    def __init__(self, model):
        self._model = model
        self._closed = False

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "BoundModelHandle":
        return cls(load_checkpoint(path))

    @property
    def n_layers(self) -> int:
        return len(self._model.analog)

    def layer(self, index: int) -> BoundLayerHandle:
        """Detached single-layer handle over layer ``index``."""
        self._require_open()
        lin = self._model.analog[index]
        return BoundLayerHandle(lin.config, lin.weight, layer_index=index)

    def close(self) -> None:
        self._closed = True
        self._model = None

    def __enter__(self) -> "BoundModelHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _require_open(self) -> None:
        if self._closed:
            raise BindingError("operation on a closed handle")


def open_layer(config: AnalogLayerConfig, weight, layer_index: int = 0) -> BoundLayerHandle:
    return BoundLayerHandle(config, weight, layer_index)


def open_model(path: str | Path) -> BoundModelHandle:
    return BoundModelHandle.from_checkpoint(path)


def bind_forward(handle: BoundLayerHandle, x, mode: str = "eval",
                 stream: RngStream | None = None) -> np.ndarray:
    """Run the layer forward pass on a host array.

    The backward cache is retained on the handle for a following
    :func:`bind_backward` call.
    """
    handle._require_open()
    a = _as_host_array(x, handle.in_features, "input")
    try:
        y, cache = forward(a, handle._config, handle._weight, mode=mode, stream=stream)
    except ValueError as e:
        raise BindingError(str(e)) from e
    handle._cache = cache
    return y


def bind_backward(handle: BoundLayerHandle, grad_y) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients for the most recent :func:`bind_forward` on this handle."""
    handle._require_open()
    if handle._cache is None:
        raise BindingError("bind_backward requires a preceding bind_forward")
    g = _as_host_array(grad_y, handle.out_features, "output gradient")
    return backward(g, handle._cache)


def bind_deploy_and_eval(
    handle: BoundLayerHandle | BoundModelHandle,
    noise_spec,
    seeds: int,
    *,
    x=None,
    labels=None,
    master_seed: int = 0,
    drift: DriftSpec | None = None,
):
    """Deploy under programming noise and evaluate, one fresh deployment
    per seed.

    For a model handle with ``labels`` this returns the per-seed accuracy
    list, bit-identical to the evaluation harness (and therefore to the
    `eval` CLI subcommand) under the same master seed. For a layer handle
    it returns the list of per-seed forward outputs on ``x``.
    """
    if noise_spec is not None and not isinstance(noise_spec, (PcmNoiseSpec, TrainNoiseSpec)):
        raise BindingError(f"invalid noise spec: {type(noise_spec).__name__}")
    if seeds < 1:
        raise BindingError("seeds must be >= 1")
    handle._require_open()

    if isinstance(handle, BoundModelHandle):
        if x is None or labels is None:
            raise BindingError("model evaluation needs x and labels")
        task = ClassificationTask(np.asarray(x, dtype=np.float64), np.asarray(labels))
        report = eval_noisy(handle._model, task, noise_spec, seeds=seeds,
                            master_seed=master_seed, drift=drift)
        return report.per_seed

    if x is None:
        raise BindingError("layer evaluation needs x")
    a = _as_host_array(x, handle.in_features, "input")
    root = RngStream(master_seed)
    outputs = []
    for k in range(seeds):
        noise_ctx = None
        if noise_spec is not None:
            stream = root.split("deploy", repetition=k).split("program",
                                                              layer_index=handle.layer_index)
            noise_ctx = deploy(handle._weight, handle._config, noise_spec, stream, drift=drift)
        y, _ = forward(a, handle._config, handle._weight, mode="eval", noise_ctx=noise_ctx)
        outputs.append(y)
    return outputs
