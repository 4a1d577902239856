"""Experiment orchestration: repeated-seed noisy evaluation, sweeps over
noise magnitude / scale / drift time, best-of-n selection, and report
serialization (CSV + JSON at full float precision)."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layer import Deployment, deploy
from .noise import DriftSpec, PcmNoiseSpec, TrainNoiseSpec
from .streams import RngStream

__all__ = [
    "ClassificationTask",
    "EvalReport",
    "TtcSample",
    "deploy_model",
    "eval_noisy",
    "sweep",
    "ttc_select",
    "ttc_accuracy",
    "ttc_curve",
    "make_toy_ttc_samples",
    "reports_to_csv",
    "reports_to_json",
    "config_fingerprint",
]

TTC_STRATEGIES = ("prm-greedy", "prm-weighted-vote", "majority-vote")


def config_fingerprint(config: dict) -> str:
    """Stable hash of a resolved configuration dictionary."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ClassificationTask:
    x: np.ndarray
    labels: np.ndarray

    def evaluate(self, model, deployments: dict[int, Deployment] | None = None) -> float:
        pred = model.predict(self.x, mode="eval", deployments=deployments)
        return float(np.mean(pred == self.labels))


@dataclass
class EvalReport:
    label: str
    per_seed: list[float]
    axis_value: float | None = None
    fingerprint: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        # population std, matching the mean +/- std reporting convention
        return float(np.std(self.per_seed))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "axis_value": self.axis_value,
            "per_seed": list(self.per_seed),
            "mean": self.mean,
            "std": self.std,
            "fingerprint": self.fingerprint,
        }


def deploy_model(model, noise_model, stream: RngStream, drift: DriftSpec | None = None) -> dict[int, Deployment]:
    """One frozen deployment per analog layer."""
    return {
        i: deploy(lin.weight, lin.config, noise_model, stream.split("program", layer_index=i), drift=drift)
        for i, lin in enumerate(model.analog)
    }


def eval_noisy(
    model,
    task: ClassificationTask,
    noise_model,
    seeds: int = 10,
    master_seed: int = 0,
    drift: DriftSpec | None = None,
    label: str = "eval",
    axis_value: float | None = None,
) -> EvalReport:
    """Fresh deployment per seed; metric recorded per seed.

    Seed k always uses the deployment stream RngStream(master_seed).split
    ("deploy", repetition=k), so comparisons between models under the
    same master seed are paired.
    """
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    values = []
    root = RngStream(master_seed)
    for k in range(seeds):
        deps = None
        if noise_model is not None:
            deps = deploy_model(model, noise_model, root.split("deploy", repetition=k), drift=drift)
        values.append(task.evaluate(model, deps))
    return EvalReport(label=label, per_seed=values, axis_value=axis_value)


def sweep(
    model,
    task: ClassificationTask,
    axis: str,
    points: list[float],
    seeds: int = 10,
    master_seed: int = 0,
    base_noise: PcmNoiseSpec | None = None,
    drift_t0: float = 25.0,
    read_noise_coeff: float = 0.0,
    label: str = "sweep",
) -> list[EvalReport]:
    """One report per axis point. Axes: gamma (additive train-style noise
    magnitude), scale (programming-noise scale factor), drift (evaluation
    time in seconds)."""
    if not points:
        raise ValueError("sweep axis is empty")
    base = base_noise or PcmNoiseSpec()
    reports = []
    for p in points:
        if axis == "gamma":
            noise = TrainNoiseSpec(gamma_weight=float(p), beta_weight=0.0) if p > 0 else None
            drift = None
        elif axis == "scale":
            noise = base.scaled(float(p))
            drift = None
        elif axis == "drift":
            noise = base
            drift = DriftSpec(t0=drift_t0, t_eval=float(p), read_noise_coeff=read_noise_coeff)
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        reports.append(eval_noisy(model, task, noise, seeds=seeds, master_seed=master_seed,
                                  drift=drift, label=f"{label}:{axis}={p}", axis_value=float(p)))
    return reports


@dataclass(frozen=True)
class TtcSample:
    prompt_id: int
    answers: tuple[str, ...]  # canonicalized final-answer keys
    rewards: tuple[float, ...]

    def __post_init__(self):
        if len(self.answers) < 1 or len(self.answers) != len(self.rewards):
            raise ValueError("need n >= 1 answers with matching rewards")
        if not np.isfinite(self.rewards).all():
            raise ValueError("rewards must be finite")


def _select_one(answers, rewards, strategy: str) -> str:
    if strategy == "prm-greedy":
        return answers[int(np.argmax(rewards))]  # argmax ties -> lowest index
    first_seen: dict[str, int] = {}
    score: dict[str, float] = {}
    for i, a in enumerate(answers):
        first_seen.setdefault(a, i)
        score[a] = score.get(a, 0.0) + (rewards[i] if strategy == "prm-weighted-vote" else 1.0)
    # ties broken by earliest first occurrence
    return max(score, key=lambda a: (score[a], -first_seen[a]))


def ttc_select(samples: list[TtcSample], strategy: str) -> list[str]:
    if not samples:
        raise ValueError("empty sample list")
    if strategy not in TTC_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {TTC_STRATEGIES}")
    return [_select_one(s.answers, s.rewards, strategy) for s in samples]


def ttc_accuracy(samples: list[TtcSample], strategy: str, gold: dict[int, str]) -> float:
    chosen = ttc_select(samples, strategy)
    return float(np.mean([c == gold[s.prompt_id] for c, s in zip(chosen, samples)]))


def ttc_curve(
    samples: list[TtcSample],
    gold: dict[int, str],
    n_max: int,
    reps: int,
    master_seed: int = 0,
) -> dict[str, dict[int, tuple[float, float]]]:
    """Accuracy vs n in {1, 2, 4, ..., n_max} per strategy.

    Every repetition subsamples each prompt's pool once, without
    replacement, and all strategies score the same subsample (paired).
    Returns strategy -> {n: (mean, population std)}.
    """
    if n_max < 1 or (n_max & (n_max - 1)) != 0:
        raise ValueError("n_max must be a power of two")
    pool = min(len(s.answers) for s in samples)
    if pool < n_max:
        raise ValueError(f"answer pool ({pool}) smaller than n_max ({n_max})")

    ns = [2**i for i in range(n_max.bit_length()) if 2**i <= n_max]
    acc: dict[str, dict[int, list[float]]] = {s: {n: [] for n in ns} for s in TTC_STRATEGIES}
    root = RngStream(master_seed)
    for rep in range(reps):
        for n in ns:
            sub = []
            for s in samples:
                idx = np.sort(root.split("subsample", layer_index=s.prompt_id,
                                         repetition=rep * len(ns) + ns.index(n)).choice(len(s.answers), n))
                sub.append(TtcSample(s.prompt_id,
                                     tuple(s.answers[j] for j in idx),
                                     tuple(s.rewards[j] for j in idx)))
            for strat in TTC_STRATEGIES:
                acc[strat][n].append(ttc_accuracy(sub, strat, gold))
    return {strat: {n: (float(np.mean(v)), float(np.std(v))) for n, v in per_n.items()}
            for strat, per_n in acc.items()}


def make_toy_ttc_samples(
    n_prompts: int,
    pool: int,
    candidate_accuracy: float,
    stream: RngStream,
    reward_gap: float = 0.5,
    reward_noise: float = 0.1,
) -> tuple[list[TtcSample], dict[int, str]]:
    """Scripted stand-in for a reward model: each candidate answer is
    correct with probability ``candidate_accuracy`` and its reward is a
    noisy indicator of correctness."""
    samples = []
    gold = {}
    for p in range(n_prompts):
        s = stream.split("ttc-prompt", layer_index=p)
        gold[p] = "g"
        correct = s.uniform(pool) < candidate_accuracy
        answers = tuple("g" if c else f"w{int(s.uniform_int(0, 3))}" for c in correct)
        rewards = tuple(float(reward_gap * c + reward_noise * z)
                        for c, z in zip(correct, s.standard_normal(pool)))
        samples.append(TtcSample(p, answers, rewards))
    return samples, gold


def reports_to_csv(reports: list[EvalReport], path: str | Path) -> None:
    """One row per (report, seed); values via repr so they round-trip."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "axis_value", "seed", "value", "mean", "std", "fingerprint"])
        for r in reports:
            for k, v in enumerate(r.per_seed):
                writer.writerow([r.label, "" if r.axis_value is None else repr(r.axis_value),
                                 k, repr(v), repr(r.mean), repr(r.std), r.fingerprint])


def reports_to_json(reports: list[EvalReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
