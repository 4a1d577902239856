"""Toy teacher/student models built from analog linear layers.

Two architectures: a two-layer tanh MLP classifier and a one-block
decoder-only transformer (single-head causal attention, no
normalization layers). Every linear operator goes through the analog
layer; embeddings, nonlinearities, attention softmax, and residual adds
are digital and exact. Backward passes are hand-derived.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from .layer import AnalogLayerConfig, Deployment, ForwardCache, backward as layer_backward, forward as layer_forward
from .quantizers import InputRangeState, calibrate_or_update_range
from .streams import RngStream

__all__ = [
    "AnalogLinear",
    "ModelGrads",
    "MlpClassifier",
    "TinyTransformer",
    "make_cluster_teacher",
    "sample_cluster_batch",
    "model_from_state",
]

BOS_TOKEN = 0


@dataclass
class AnalogLinear:
    config: AnalogLayerConfig
    weight: np.ndarray


@dataclass
class ModelGrads:
    """Gradients keyed the same way the optimizer walks the model."""

    weights: list[np.ndarray]
    betas: list[float]
    digital: dict[str, np.ndarray] = field(default_factory=dict)


def _run_linear(
    lin: AnalogLinear,
    x: np.ndarray,
    index: int,
    mode: str,
    noise_stream: RngStream | None,
    deployments: dict[int, Deployment] | None,
    configs: list[AnalogLayerConfig] | None,
    update_ranges: bool,
) -> tuple[np.ndarray, ForwardCache, np.ndarray]:
    """One analog layer call with range warm-up and config overrides."""
    state = lin.config.input_range
    if update_ranges and lin.config.input_quant_enabled and state.in_warmup:
        state = calibrate_or_update_range(x, state)
        lin.config.input_range = state
    cfg = lin.config if configs is None else replace(configs[index], input_range=state)
    stream = noise_stream.split("weight-noise", layer_index=index) if noise_stream is not None else None
    ctx = deployments.get(index) if deployments else None
    y, cache = layer_forward(x, cfg, lin.weight, mode=mode, noise_ctx=ctx, stream=stream)
    return y, cache, x


class MlpClassifier:
    """Two analog linear layers with a tanh in between."""

    arch = "mlp"

    def __init__(self, layers: list[AnalogLinear]):
        if len(layers) != 2:
            raise ValueError("MlpClassifier expects exactly two analog layers")
        self.analog = layers
        self.digital: dict[str, np.ndarray] = {}

    @property
    def n_features(self) -> int:
        return self.analog[0].config.in_features

    @property
    def n_classes(self) -> int:
        return self.analog[1].config.out_features

    def forward(
        self,
        x: np.ndarray,
        mode: str = "eval",
        noise_stream: RngStream | None = None,
        deployments: dict[int, Deployment] | None = None,
        configs: list[AnalogLayerConfig] | None = None,
        update_ranges: bool = False,
    ):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y1, c1, r1 = _run_linear(self.analog[0], x, 0, mode, noise_stream, deployments, configs, update_ranges)
        h = np.tanh(y1)
        y2, c2, r2 = _run_linear(self.analog[1], h, 1, mode, noise_stream, deployments, configs, update_ranges)
        cache = {"caches": [c1, c2], "raw_inputs": [r1, r2], "h": h}
        return y2, cache

    def backward(self, grad_logits: np.ndarray, cache) -> ModelGrads:
        c1, c2 = cache["caches"]
        gh, gw2, gb2 = layer_backward(grad_logits, c2)
        gy1 = gh * (1.0 - cache["h"] ** 2)
        _, gw1, gb1 = layer_backward(gy1, c1)
        return ModelGrads(weights=[gw1, gw2], betas=[gb1, gb2])

    def predict(self, x: np.ndarray, **kw) -> np.ndarray:
        logits, _ = self.forward(x, **kw)
        return np.argmax(logits, axis=1)

    def state(self) -> dict:
        return _model_state(self)


class TinyTransformer:
    """One-block decoder-only transformer without normalization layers.

    Analog layers, in order: wq, wk, wv, wo, w1 (up projection), w2
    (down projection), w_out (vocabulary head). Token and position
    embeddings are digital parameters.
    """

    arch = "tiny-transformer"
    LAYER_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2", "w_out")

    def __init__(self, layers: list[AnalogLinear], embed: np.ndarray, pos: np.ndarray):
        if len(layers) != 7:
            raise ValueError("TinyTransformer expects seven analog layers")
        self.analog = layers
        self.digital = {"embed": np.asarray(embed, dtype=np.float64), "pos": np.asarray(pos, dtype=np.float64)}

    @classmethod
    def build(cls, vocab_size: int, dim: int, max_seq_len: int, ff_dim: int, stream: RngStream,
              layer_config: AnalogLayerConfig | None = None) -> "TinyTransformer":
        def cfg(n_in, n_out):
            base = layer_config or AnalogLayerConfig(in_features=1, out_features=1)
            return replace(base, in_features=n_in, out_features=n_out, input_range=InputRangeState())

        dims = [(dim, dim)] * 4 + [(dim, ff_dim), (ff_dim, dim), (dim, vocab_size)]
        layers = []
        for i, (n_in, n_out) in enumerate(dims):
            w = stream.split("init", layer_index=i).standard_normal((n_in, n_out)) / np.sqrt(n_in)
            layers.append(AnalogLinear(cfg(n_in, n_out), w))
        embed = stream.split("init-embed").standard_normal((vocab_size, dim)) * 0.5
        pos = stream.split("init-pos").standard_normal((max_seq_len, dim)) * 0.1
        return cls(layers, embed, pos)

    @property
    def vocab_size(self) -> int:
        return self.digital["embed"].shape[0]

    @property
    def dim(self) -> int:
        return self.digital["embed"].shape[1]

    @property
    def max_seq_len(self) -> int:
        return self.digital["pos"].shape[0]

    def forward(
        self,
        tokens: np.ndarray,
        mode: str = "eval",
        noise_stream: RngStream | None = None,
        deployments: dict[int, Deployment] | None = None,
        configs: list[AnalogLayerConfig] | None = None,
        update_ranges: bool = False,
    ):
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        b, s = tokens.shape
        if s > self.max_seq_len:
            raise ValueError(f"sequence length {s} exceeds model maximum {self.max_seq_len}")
        d = self.dim

        def run(i, x2d):
            return _run_linear(self.analog[i], x2d, i, mode, noise_stream, deployments, configs, update_ranges)

        h0 = self.digital["embed"][tokens] + self.digital["pos"][:s][None, :, :]
        flat0 = h0.reshape(b * s, d)
        q2, cq, rq = run(0, flat0)
        k2, ck, rk = run(1, flat0)
        v2, cv, rv = run(2, flat0)
        q, k, v = (a.reshape(b, s, d) for a in (q2, k2, v2))

        scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
        mask = np.triu(np.ones((s, s), dtype=bool), k=1)
        scores = np.where(mask[None, :, :], -1e30, scores)
        attn_w = softmax(scores, axis=-1)
        attn = attn_w @ v

        o2, co, ro = run(3, attn.reshape(b * s, d))
        h1 = h0 + o2.reshape(b, s, d)

        m_pre, c1, r1 = run(4, h1.reshape(b * s, d))
        m = np.maximum(m_pre, 0.0)
        f2, c2, r2 = run(5, m)
        h2 = h1 + f2.reshape(b, s, d)

        logits2, cout, rout = run(6, h2.reshape(b * s, d))
        logits = logits2.reshape(b, s, self.vocab_size)

        cache = {
            "caches": [cq, ck, cv, co, c1, c2, cout],
            "raw_inputs": [rq, rk, rv, ro, r1, r2, rout],
            "tokens": tokens,
            "attn_w": attn_w,
            "q": q, "k": k, "v": v,
            "m_pre": m_pre,
            "shape": (b, s, d),
        }
        return logits, cache

    def backward(self, grad_logits: np.ndarray, cache) -> ModelGrads:
        b, s, d = cache["shape"]
        cq, ck, cv, co, c1, c2, cout = cache["caches"]
        attn_w, q, k, v = cache["attn_w"], cache["q"], cache["k"], cache["v"]

        gh2_flat, gw_out, gb_out = layer_backward(grad_logits.reshape(b * s, -1), cout)
        gh2 = gh2_flat.reshape(b, s, d)

        gm, gw2, gb2 = layer_backward(gh2.reshape(b * s, d), c2)
        gm_pre = gm * (cache["m_pre"] > 0)
        gh1_mlp, gw1, gb1 = layer_backward(gm_pre, c1)
        gh1 = gh2 + gh1_mlp.reshape(b, s, d)

        gattn_flat, gwo, gbo = layer_backward(gh1.reshape(b * s, d), co)
        ga = gattn_flat.reshape(b, s, d)
        gh0 = gh1.copy()

        d_attn_w = ga @ v.transpose(0, 2, 1)
        gv3 = attn_w.transpose(0, 2, 1) @ ga
        # softmax jacobian row by row; masked entries have attn_w = 0
        g_scores = attn_w * (d_attn_w - np.sum(d_attn_w * attn_w, axis=-1, keepdims=True))
        gq3 = g_scores @ k / np.sqrt(d)
        gk3 = g_scores.transpose(0, 2, 1) @ q / np.sqrt(d)

        gx_q, gwq, gbq = layer_backward(gq3.reshape(b * s, d), cq)
        gx_k, gwk, gbk = layer_backward(gk3.reshape(b * s, d), ck)
        gx_v, gwv, gbv = layer_backward(gv3.reshape(b * s, d), cv)
        gh0 += (gx_q + gx_k + gx_v).reshape(b, s, d)

        tokens = cache["tokens"]
        g_embed = np.zeros_like(self.digital["embed"])
        np.add.at(g_embed, tokens.ravel(), gh0.reshape(b * s, d))
        g_pos = np.zeros_like(self.digital["pos"])
        g_pos[:s] = gh0.sum(axis=0)

        return ModelGrads(
            weights=[gwq, gwk, gwv, gwo, gw1, gw2, gw_out],
            betas=[gbq, gbk, gbv, gbo, gb1, gb2, gb_out],
            digital={"embed": g_embed, "pos": g_pos},
        )

    def next_token_logits(self, context: np.ndarray, **kw) -> np.ndarray:
        """Logits for the token following ``context`` (1-D token ids)."""
        logits, _ = self.forward(np.asarray(context, dtype=np.int64)[None, :], **kw)
        return logits[0, -1]

    def state(self) -> dict:
        return _model_state(self)


def make_cluster_teacher(
    n_features: int,
    n_classes: int,
    stream: RngStream,
    hidden_gain: float = 4.0,
    outlier_scale: float = 0.0,
    layer_config: AnalogLayerConfig | None = None,
) -> tuple[MlpClassifier, np.ndarray]:
    """Analytic MLP teacher for a Gaussian-cluster classification task.

    Cluster centers occupy the first ``n_classes`` coordinates; hidden
    unit i fires for cluster i. ``outlier_scale`` > 0 plants one large
    weight per first-layer column on a signal-free input coordinate,
    inflating the per-channel maximum without changing the function much.
    """
    if n_features < 2 * n_classes:
        raise ValueError("need n_features >= 2 * n_classes to host outlier coordinates")
    centers = np.zeros((n_classes, n_features))
    for i in range(n_classes):
        centers[i, i] = 1.0

    w1 = stream.split("teacher-w1").standard_normal((n_features, n_classes)) * 0.02
    for i in range(n_classes):
        w1[:, i] += hidden_gain * centers[i]
    if outlier_scale > 0:
        for i in range(n_classes):
            # dead coordinate: carries only sampling noise, not signal
            w1[n_classes + i, i] = outlier_scale * hidden_gain
    w2 = np.eye(n_classes) * 3.0 + stream.split("teacher-w2").standard_normal((n_classes, n_classes)) * 0.02

    def cfg(n_in, n_out):
        base = layer_config or AnalogLayerConfig(in_features=1, out_features=1)
        return replace(base, in_features=n_in, out_features=n_out, input_range=InputRangeState())

    layers = [AnalogLinear(cfg(n_features, n_classes), w1), AnalogLinear(cfg(n_classes, n_classes), w2)]
    return MlpClassifier(layers), centers


def sample_cluster_batch(
    centers: np.ndarray,
    n: int,
    stream: RngStream,
    noise_std: float = 0.15,
    dead_noise_std: float = 0.02,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw points from the Gaussian mixture defined by ``centers``.

    Coordinates beyond the first k (the class coordinates) are nearly
    constant: they exist so a teacher can host outlier weights that the
    task itself barely exercises.
    """
    k, d = centers.shape
    labels = stream.uniform_int(0, k, size=n)
    scale = np.full(d, dead_noise_std)
    scale[:k] = noise_std
    x = centers[labels] + stream.standard_normal((n, d)) * scale[None, :]
    return x, labels


def _range_state_dict(s: InputRangeState) -> dict:
    return {
        "beta": s.beta, "forward_count": s.forward_count, "warmup_limit": s.warmup_limit,
        "kappa": s.kappa, "ema_decay": s.ema_decay, "learn_decay": s.learn_decay,
        "min_inside_fraction": s.min_inside_fraction, "frozen": s.frozen,
    }


def _config_dict(c: AnalogLayerConfig) -> dict:
    return {
        "in_features": c.in_features, "out_features": c.out_features,
        "input_bits": c.input_bits, "output_bits": c.output_bits,
        "lambda_adc": c.lambda_adc,
        "train_noise": {"gamma_weight": c.train_noise.gamma_weight, "beta_weight": c.train_noise.beta_weight},
        "clip_alpha": c.clip_alpha, "tile_size": c.tile_size,
        "input_quant_enabled": c.input_quant_enabled, "output_quant_enabled": c.output_quant_enabled,
        "qat_weight_bits": c.qat_weight_bits,
        "input_range": _range_state_dict(c.input_range),
    }


def _config_from_dict(d: dict) -> AnalogLayerConfig:
    from .noise import TrainNoiseSpec

    return AnalogLayerConfig(
        in_features=d["in_features"], out_features=d["out_features"],
        input_bits=d["input_bits"], output_bits=d["output_bits"],
        lambda_adc=d["lambda_adc"],
        train_noise=TrainNoiseSpec(**d["train_noise"]),
        clip_alpha=d["clip_alpha"], tile_size=d["tile_size"],
        input_quant_enabled=d["input_quant_enabled"], output_quant_enabled=d["output_quant_enabled"],
        qat_weight_bits=d["qat_weight_bits"],
        input_range=InputRangeState(**d["input_range"]),
    )


def _model_state(model) -> dict:
    return {
        "arch": model.arch,
        "configs": [_config_dict(lin.config) for lin in model.analog],
        "weights": [lin.weight for lin in model.analog],
        "digital": dict(model.digital),
    }


def model_from_state(state: dict):
    layers = [AnalogLinear(_config_from_dict(c), np.asarray(w, dtype=np.float64))
              for c, w in zip(state["configs"], state["weights"])]
    if state["arch"] == "mlp":
        return MlpClassifier(layers)
    if state["arch"] == "tiny-transformer":
        return TinyTransformer(layers, state["digital"]["embed"], state["digital"]["pos"])
    raise ValueError(f"unknown architecture {state['arch']!r}")
