"""Command-line surface.

Subcommands: gen-data, train, eval, sweep-noise, sweep-drift, ttc,
analyze, export-quantized, inspect-checkpoint. Options may come from a
JSON config file (--config); any flag given on the command line
overrides the config key of the same name (dashes become underscores).

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import layer_report
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, inspect_checkpoint
from .datagen import GenSpec, generate_sequences, load_dataset, save_dataset
from .experiments import ClusterSpec, build_cluster_experiment, student_from_teacher, train_cluster_student
from .harness import (
    config_fingerprint,
    eval_noisy,
    make_toy_ttc_samples,
    reports_to_csv,
    reports_to_json,
    sweep,
    ttc_curve,
)
from .models import TinyTransformer
from .noise import DriftSpec, PcmNoiseSpec, TrainNoiseSpec
from .quantizers import rtn_quantize_weights
from .streams import RngStream
from .training import TrainConfig, TrainingDivergence, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


def _resolve(args: argparse.Namespace, config: dict, key: str, default=None, required: bool = False):
    cli = getattr(args, key, None)
    if cli is not None:
        return cli
    if key in config:
        return config[key]
    if required:
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return default


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _cluster_spec(args, config) -> ClusterSpec:
    r = lambda key, default: _resolve(args, config, key, default)
    return ClusterSpec(
        n_features=int(r("n_features", 16)),
        n_classes=int(r("n_classes", 4)),
        outlier_scale=float(r("outlier_scale", 6.0)),
        train_samples=int(r("train_samples", 4096)),
        eval_samples=int(r("eval_samples", 1024)),
        gamma_weight=float(r("gamma", 0.02)),
        clip_alpha=float(r("clip_alpha", 3.0)),
        input_bits=int(r("input_bits", 8)),
        output_bits=int(r("output_bits", 8)),
        lambda_adc=float(r("lambda_adc", 2.0)),
    )


def _noise_model(args, config):
    kind = _resolve(args, config, "noise", "pcm")
    if kind == "none":
        return None
    if kind == "pcm":
        return PcmNoiseSpec().scaled(float(_resolve(args, config, "scale", 1.0)))
    if kind == "gaussian":
        return TrainNoiseSpec(gamma_weight=float(_resolve(args, config, "gamma", 0.02)), beta_weight=0.0)
    raise ConfigError(f"unknown noise model {kind!r}")


def cmd_gen_data(args, config) -> int:
    seed = int(_resolve(args, config, "seed", 0))
    out = _resolve(args, config, "out", required=True)
    teacher_path = _resolve(args, config, "teacher")
    if teacher_path:
        teacher = load_checkpoint(teacher_path)
    else:
        teacher = TinyTransformer.build(
            vocab_size=int(_resolve(args, config, "vocab", 32)),
            dim=int(_resolve(args, config, "dim", 16)),
            max_seq_len=int(_resolve(args, config, "seq_len", 8)) + 1,
            ff_dim=int(_resolve(args, config, "ff_dim", 32)),
            stream=RngStream(seed).split("teacher-init"),
        )
        save_checkpoint(teacher, str(out) + ".teacher.ckpt")
    spec = GenSpec(
        strategy=_resolve(args, config, "strategy", "SSS"),
        sequence_length=int(_resolve(args, config, "seq_len", 8)),
        top_k=(int(args.top_k) if getattr(args, "top_k", None) else config.get("top_k")),
        greedy_prefix_len=int(_resolve(args, config, "greedy_prefix_len", 5)),
        filter_fraction=float(_resolve(args, config, "filter_fraction", 0.0)),
    )
    ds = generate_sequences(teacher, spec, int(_resolve(args, config, "count", 256)), RngStream(seed).split("gen"))
    save_dataset(ds, out, summary={"strategy": spec.strategy, "seed": seed,
                                   "filter_fraction": spec.filter_fraction})
    print(f"wrote {len(ds)} sequences to {out}")
    return EXIT_OK


def cmd_train(args, config) -> int:
    task = _resolve(args, config, "task", "cluster")
    seed = int(_resolve(args, config, "seed", 0))
    out = _resolve(args, config, "out", required=True)
    cfg = TrainConfig(
        mode=_resolve(args, config, "mode", "hwa"),
        epochs=int(_resolve(args, config, "epochs", 2)),
        batch_size=int(_resolve(args, config, "batch_size", 64)),
        lr=float(_resolve(args, config, "lr", 1e-3)),
        weight_decay=float(_resolve(args, config, "weight_decay", 0.01)),
    )
    if task == "cluster":
        spec = _cluster_spec(args, config)
        teacher, _, train_x, _ = build_cluster_experiment(spec, seed)
        result = train_cluster_student(teacher, train_x, spec, cfg, seed)
    elif task == "sequence":
        teacher = load_checkpoint(_resolve(args, config, "teacher", required=True))
        data = load_dataset(_resolve(args, config, "data", required=True))
        student = student_from_teacher(teacher, _cluster_spec(args, config))
        result = train(student, teacher, data, cfg, RngStream(seed).split("train"))
    else:
        raise ConfigError(f"unknown task {task!r}")
    save_checkpoint(result.model, out)
    Path(str(out) + ".trace.json").write_text(
        json.dumps({"loss_trace": list(result.loss_trace), "steps": result.steps}, sort_keys=True) + "\n")
    print(f"trained {cfg.mode} student for {result.steps} steps; final loss {result.loss_trace[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    model = load_checkpoint(_resolve(args, config, "checkpoint", required=True))
    seed = int(_resolve(args, config, "seed", 0))
    spec = _cluster_spec(args, config)
    _, _, _, task = build_cluster_experiment(spec, seed)
    drift = None
    t_eval = _resolve(args, config, "t_eval")
    if t_eval is not None:
        drift = DriftSpec(t0=float(_resolve(args, config, "t0", 25.0)), t_eval=float(t_eval),
                          read_noise_coeff=float(_resolve(args, config, "read_noise", 0.0)))
    report = eval_noisy(model, task, _noise_model(args, config),
                        seeds=int(_resolve(args, config, "seeds", 10)),
                        master_seed=int(_resolve(args, config, "master_seed", 0)),
                        drift=drift)
    report.fingerprint = config_fingerprint({"cmd": "eval", "seed": seed, "seeds": len(report.per_seed),
                                             "noise": _resolve(args, config, "noise", "pcm")})
    _emit(args, config, [report])
    print(f"accuracy {report.mean:.6f} +/- {report.std:.6f} over {len(report.per_seed)} seeds")
    return EXIT_OK


def cmd_sweep_noise(args, config) -> int:
    model = load_checkpoint(_resolve(args, config, "checkpoint", required=True))
    seed = int(_resolve(args, config, "seed", 0))
    _, _, _, task = build_cluster_experiment(_cluster_spec(args, config), seed)
    axis = _resolve(args, config, "axis", "gamma")
    if axis not in ("gamma", "scale"):
        raise ConfigError(f"sweep-noise axis must be gamma or scale, got {axis!r}")
    points = _floats(_resolve(args, config, "points", required=True))
    reports = sweep(model, task, axis, points,
                    seeds=int(_resolve(args, config, "seeds", 10)),
                    master_seed=int(_resolve(args, config, "master_seed", 0)))
    fp = config_fingerprint({"cmd": "sweep-noise", "axis": axis, "points": points, "seed": seed})
    for r in reports:
        r.fingerprint = fp
    _emit(args, config, reports)
    return EXIT_OK


def cmd_sweep_drift(args, config) -> int:
    model = load_checkpoint(_resolve(args, config, "checkpoint", required=True))
    seed = int(_resolve(args, config, "seed", 0))
    _, _, _, task = build_cluster_experiment(_cluster_spec(args, config), seed)
    points = _floats(_resolve(args, config, "times", required=True))
    reports = sweep(model, task, "drift", points,
                    seeds=int(_resolve(args, config, "seeds", 10)),
                    master_seed=int(_resolve(args, config, "master_seed", 0)),
                    drift_t0=float(_resolve(args, config, "t0", 25.0)),
                    read_noise_coeff=float(_resolve(args, config, "read_noise", 0.0)))
    fp = config_fingerprint({"cmd": "sweep-drift", "times": points, "seed": seed})
    for r in reports:
        r.fingerprint = fp
    _emit(args, config, reports)
    return EXIT_OK


def cmd_ttc(args, config) -> int:
    seed = int(_resolve(args, config, "master_seed", 0))
    samples, gold = make_toy_ttc_samples(
        n_prompts=int(_resolve(args, config, "prompts", 40)),
        pool=int(_resolve(args, config, "pool", 64)),
        candidate_accuracy=float(_resolve(args, config, "accuracy", 0.4)),
        stream=RngStream(seed).split("ttc"),
    )
    curve = ttc_curve(samples, gold,
                      n_max=int(_resolve(args, config, "n_max", 32)),
                      reps=int(_resolve(args, config, "reps", 5)),
                      master_seed=seed)
    out = _resolve(args, config, "out", required=True)
    payload = {strat: {str(n): [m, s] for n, (m, s) in per_n.items()} for strat, per_n in curve.items()}
    Path(out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote best-of-n curve to {out}")
    return EXIT_OK


def cmd_analyze(args, config) -> int:
    model = load_checkpoint(_resolve(args, config, "checkpoint", required=True))
    bits = int(_resolve(args, config, "bits", 4))
    spec = PcmNoiseSpec()
    reports = [layer_report(i, lin.weight, spec, bits=bits) for i, lin in enumerate(model.analog)]
    for r in reports:
        print(f"layer {r.layer_id}: mean_snr_db={r.mean_snr_db:.4f} "
              f"rtn_err={r.mean_abs_quant_error:.6f} kurtosis={r.kurtosis:.4f} "
              f"kl_to_uniform={r.kl_to_uniform:.4f}")
    out = _resolve(args, config, "out")
    if out:
        Path(out).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_export_quantized(args, config) -> int:
    model = load_checkpoint(_resolve(args, config, "checkpoint", required=True))
    bits = int(_resolve(args, config, "bits", 4))
    for lin in model.analog:
        lin.weight = rtn_quantize_weights(lin.weight, bits)
    out = _resolve(args, config, "out", required=True)
    save_checkpoint(model, out)
    print(f"wrote {bits}-bit round-to-nearest weights to {out}")
    return EXIT_OK


def cmd_inspect_checkpoint(args, config) -> int:
    info = inspect_checkpoint(_resolve(args, config, "checkpoint", required=True))
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def _emit(args, config, reports) -> None:
    out = _resolve(args, config, "out", required=True)
    reports_to_csv(reports, str(out) + ".csv")
    reports_to_json(reports, str(out) + ".json")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; CLI flags override its keys")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aimcsim",
                                     description="analog in-memory computing simulation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, options):
        p = sub.add_parser(name)
        _add_common(p)
        for opt, kw in options.items():
            p.add_argument(opt, **kw)
        p.set_defaults(func=func)

    add("gen-data", cmd_gen_data, {
        "--seed": dict(type=int), "--out": dict(), "--teacher": dict(),
        "--vocab": dict(type=int), "--dim": dict(type=int), "--seq-len": dict(type=int),
        "--ff-dim": dict(type=int), "--count": dict(type=int), "--strategy": dict(),
        "--top-k": dict(type=int), "--greedy-prefix-len": dict(type=int),
        "--filter-fraction": dict(type=float),
    })
    train_opts = {
        "--task": dict(), "--seed": dict(type=int), "--out": dict(), "--mode": dict(),
        "--epochs": dict(type=int), "--batch-size": dict(type=int), "--lr": dict(type=float),
        "--weight-decay": dict(type=float), "--gamma": dict(type=float),
        "--clip-alpha": dict(type=float), "--lambda-adc": dict(type=float),
        "--outlier-scale": dict(type=float), "--train-samples": dict(type=int),
        "--teacher": dict(), "--data": dict(),
    }
    add("train", cmd_train, train_opts)
    eval_opts = {
        "--checkpoint": dict(), "--seed": dict(type=int), "--out": dict(),
        "--noise": dict(choices=["none", "pcm", "gaussian"]), "--gamma": dict(type=float),
        "--scale": dict(type=float), "--seeds": dict(type=int), "--master-seed": dict(type=int),
        "--t-eval": dict(type=float), "--t0": dict(type=float), "--read-noise": dict(type=float),
        "--outlier-scale": dict(type=float), "--lambda-adc": dict(type=float),
        "--train-samples": dict(type=int), "--eval-samples": dict(type=int),
    }
    add("eval", cmd_eval, eval_opts)
    add("sweep-noise", cmd_sweep_noise, {
        "--checkpoint": dict(), "--seed": dict(type=int), "--out": dict(),
        "--axis": dict(choices=["gamma", "scale"]), "--points": dict(),
        "--seeds": dict(type=int), "--master-seed": dict(type=int),
        "--outlier-scale": dict(type=float), "--lambda-adc": dict(type=float),
        "--train-samples": dict(type=int), "--eval-samples": dict(type=int),
    })
    add("sweep-drift", cmd_sweep_drift, {
        "--checkpoint": dict(), "--seed": dict(type=int), "--out": dict(),
        "--times": dict(), "--t0": dict(type=float), "--read-noise": dict(type=float),
        "--seeds": dict(type=int), "--master-seed": dict(type=int),
        "--outlier-scale": dict(type=float), "--lambda-adc": dict(type=float),
        "--train-samples": dict(type=int), "--eval-samples": dict(type=int),
    })
    add("ttc", cmd_ttc, {
        "--prompts": dict(type=int), "--pool": dict(type=int), "--accuracy": dict(type=float),
        "--n-max": dict(type=int), "--reps": dict(type=int), "--master-seed": dict(type=int),
        "--out": dict(),
    })
    add("analyze", cmd_analyze, {"--checkpoint": dict(), "--bits": dict(type=int), "--out": dict()})
    add("export-quantized", cmd_export_quantized, {"--checkpoint": dict(), "--bits": dict(type=int), "--out": dict()})
    add("inspect-checkpoint", cmd_inspect_checkpoint, {"--checkpoint": dict()})
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except TrainingDivergence as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as e:
        # dataset/file format problems are data errors, the rest configuration
        if "magic" in str(e) or "version" in str(e) or "truncated" in str(e):
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
