"""End-to-end acceptance suite.

One test per headline guarantee, each at its stated tolerance; every
test prints a single PASS line on success (a failed assert aborts the
test before the line is printed).
"""

import json
import time
from collections import Counter
from pathlib import Path

import numpy as np

from aimcsim.analysis import distribution_report, layer_mean_snr, rtn_error_report
from aimcsim.cli import EXIT_OK, main
from aimcsim.datagen import GenSpec, generate_sequences
from aimcsim.experiments import (
    ClusterSpec,
    build_cluster_experiment,
    student_from_teacher,
    train_cluster_student,
)
from aimcsim.harness import TtcSample, eval_noisy, make_toy_ttc_samples, ttc_curve, ttc_select
from aimcsim.layer import AnalogLayerConfig, backward, clip_weights, forward
from aimcsim.models import TinyTransformer
from aimcsim.noise import PcmNoiseSpec, TrainNoiseSpec, pcm_sigma_pct, program_pcm
from aimcsim.quantizers import InputRangeState, QuantSpec, quantize_input, quantize_output, rtn_quantize_weights
from aimcsim.streams import RngStream
from aimcsim.training import TrainConfig, train


def _report(name):
    print(f"PASS {name}")


def test_quantizer_suite():
    """Idempotence, odd symmetry, grid membership, monotonicity on 10k
    random vectors for each quantizer. Runtime bound: 10 s."""
    t0 = time.monotonic()
    stream = RngStream(1000)
    n = 10_000

    # input quantizer (8 bits, bound 1.0)
    state = InputRangeState(beta=1.0)
    spec8 = QuantSpec(8)
    step = 1.0 / spec8.levels
    x = 3.0 * stream.standard_normal((n, 16))
    q = quantize_input(x, state, spec8)
    np.testing.assert_array_equal(quantize_input(q, state, spec8), q)  # idempotent
    np.testing.assert_array_equal(quantize_input(-x, state, spec8), -q)  # odd
    k = q / step
    np.testing.assert_array_equal(k, np.rint(k))  # on grid
    assert np.abs(q).max() <= 1.0 + 1e-15
    y = x + np.abs(stream.standard_normal((n, 16)))
    assert np.all(quantize_input(y, state, spec8) >= q)  # monotone

    # output quantizer (fixed weights -> fixed per-column bounds)
    w = stream.standard_normal((8, 6))
    bounds = 12.0 * np.abs(w).max(axis=0)
    yv = 2.0 * bounds * stream.standard_normal((n, 6))
    qo = quantize_output(yv, w, 1.0, 12.0, spec8)
    np.testing.assert_array_equal(quantize_output(qo, w, 1.0, 12.0, spec8), qo)
    np.testing.assert_array_equal(quantize_output(-yv, w, 1.0, 12.0, spec8), -qo)
    ko = qo / (bounds / spec8.levels)
    np.testing.assert_allclose(ko, np.rint(ko), atol=1e-9)
    assert np.all(np.abs(qo) <= bounds + 1e-12)
    y2 = yv + np.abs(stream.standard_normal((n, 6)))
    assert np.all(quantize_output(y2, w, 1.0, 12.0, spec8) >= qo - 1e-15)

    # round-to-nearest weight quantizer: 10k column vectors, pinned max
    wv = np.clip(stream.standard_normal((16, n)), -3.5, 3.5)
    wv[0, :] = 4.0  # fixed per-column max so the grid is stable
    qw = rtn_quantize_weights(wv, 4)
    np.testing.assert_allclose(rtn_quantize_weights(qw, 4), qw, atol=1e-12)
    np.testing.assert_array_equal(rtn_quantize_weights(-wv, 4), -qw)
    kw = qw / (4.0 / QuantSpec(4).levels)
    np.testing.assert_allclose(kw, np.rint(kw), atol=1e-9)
    w2 = wv.copy()
    w2[1:, :] += np.abs(stream.standard_normal((15, n)))
    w2[1:, :] = np.minimum(w2[1:, :], 4.0)  # keep the pinned max
    assert np.all(rtn_quantize_weights(w2, 4)[1:, :] >= qw[1:, :] - 1e-12)

    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _report(f"quantizer suite (10k vectors each, {elapsed:.2f}s)")


def test_output_quantizer_order_of_operations():
    """Round first, clamp second: a value at 63.5 grid units rounds to 64
    units (ties to even) and only then maps back, giving 64 * 6/127."""
    w = np.array([[0.5], [-0.25]])  # max|W| = 0.5 -> bound = 12 * 1 * 0.5 = 6
    step = 6.0 / 127.0
    y = np.array([[63.5 * step]])
    out = quantize_output(y, w, beta_inp=1.0, lambda_adc=12.0, spec=QuantSpec(8))
    assert out[0, 0] == 64.0 * step
    assert round(out[0, 0], 4) == 3.0236
    # clamp-first at the boundary would differ: a value above the bound
    # still lands exactly on the bound, never beyond
    hi = quantize_output(np.array([[10.0]]), w, 1.0, 12.0, QuantSpec(8))
    assert hi[0, 0] == 6.0
    _report("output quantizer order of operations (63.5 -> 64 -> 3.0236)")


def test_pcm_model_calibration():
    """Bucketed empirical sigma within 3% of the programming-noise
    polynomial at g in {10,30,50,70,90} over 1e6 draws per point;
    anchors sigma(0) = 2.11 and sigma(50) = 8.2475. Runtime bound: 30 s."""
    t0 = time.monotonic()
    spec = PcmNoiseSpec()
    assert pcm_sigma_pct(0.0, spec) == 2.11
    assert pcm_sigma_pct(50.0, spec) == 8.2475
    assert abs(pcm_sigma_pct(50.0, spec) - 8.25) < 0.01

    n = 1_000_000
    for gi, g in enumerate((10.0, 30.0, 50.0, 70.0, 90.0)):
        w = np.full((n + 1, 1), g / 100.0)
        w[0, 0] = 1.0  # pins the per-channel reference at 1.0
        out = program_pcm(w, spec, RngStream(2000 + gi))
        sigma_emp = 100.0 * np.std(out[1:, 0] - g / 100.0)
        assert abs(sigma_emp - pcm_sigma_pct(g, spec)) / pcm_sigma_pct(g, spec) < 0.03
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    _report(f"programming-noise calibration (5 buckets x 1e6 draws, {elapsed:.2f}s)")


def test_noise_scaling_linearity():
    """scale_factor in {1.5, 2.0} multiplies the empirical sigma by the
    same factor within 2%."""
    base = PcmNoiseSpec()
    n = 400_000
    w = np.full((n + 1, 1), 0.5)
    w[0, 0] = 1.0
    ref = np.std(program_pcm(w, base, RngStream(3000))[1:, 0] - 0.5)
    for factor in (1.5, 2.0):
        out = program_pcm(w, base.scaled(factor), RngStream(3001))
        sigma = np.std(out[1:, 0] - 0.5)
        assert abs(sigma / ref - factor) / factor < 0.02
    _report("noise scaling linearity (1.5x, 2.0x within 2%)")


def test_ste_gradient_suite():
    """Straight-through backward vs central finite differences of the
    noise-free dense map at interior on-grid points: relative error
    <= 1e-5 over 50 random layer instances; clamp-masked entries zero."""
    stream = RngStream(4000)
    for rep in range(50):
        n_in, n_out = 4 + int(stream.uniform_int(0, 5)), 3 + int(stream.uniform_int(0, 4))
        cfg = AnalogLayerConfig(n_in, n_out, input_quant_enabled=True, output_quant_enabled=True,
                                input_range=InputRangeState(beta=1.0))
        w = stream.standard_normal((n_in, n_out))
        step = 1.0 / QuantSpec(cfg.input_bits).levels
        ticks = stream.uniform_int(-100, 101, (3, n_in)).astype(np.float64)
        x = ticks * step  # strictly inside (-1, 1), exactly on the input grid
        grad_y = stream.standard_normal((3, n_out))

        _, cache = forward(x, cfg, w, mode="train")
        gx, gw, _ = backward(grad_y, cache)

        # dense-map oracle: d sum(G * (x @ W)) / dx = G W^T, / dW = x^T G
        eps = 1e-6
        for idx in [(0, 0), (2, n_in - 1)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            fd = float(np.sum(grad_y * (xp @ w)) - np.sum(grad_y * (xm @ w))) / (2 * eps)
            assert abs(gx[idx] - fd) <= 1e-5 * max(1.0, abs(fd))
        for idx in [(0, 0), (n_in - 1, n_out - 1)]:
            wp, wm = w.copy(), w.copy()
            wp[idx] += eps
            wm[idx] -= eps
            fd = float(np.sum(grad_y * (x @ wp)) - np.sum(grad_y * (x @ wm))) / (2 * eps)
            assert abs(gw[idx] - fd) <= 1e-5 * max(1.0, abs(fd))

        # clamp mask: inputs beyond the bound get exactly zero gradient
        x_out = x.copy()
        x_out[0, 0] = 2.0
        _, cache2 = forward(x_out, cfg, w, mode="train")
        gx2, _, _ = backward(grad_y, cache2)
        assert gx2[0, 0] == 0.0
    _report("straight-through gradient suite (50 instances, rel err <= 1e-5)")


def test_tiling_equivalence_and_tile_snr():
    """Noiseless tiled forward matches the dense product within 1e-10
    relative for tile sizes 2, 3, 64 on matrices up to 256x256; per-tile
    noise normalization never loses to per-channel on 100 outlier-seeded
    matrices."""
    stream = RngStream(5000)
    shapes = [(8, 6), (64, 64), (131, 200), (256, 256)]
    for n_in, n_out in shapes:
        w = stream.standard_normal((n_in, n_out))
        x = stream.standard_normal((5, n_in))
        dense = x @ w
        scale = np.abs(dense).max()
        for tile in (2, 3, 64):
            if tile > max(n_in, n_out):
                continue
            cfg = AnalogLayerConfig(n_in, n_out, tile_size=tile)
            y, _ = forward(x, cfg, w, mode="eval")
            assert np.abs(y - dense).max() <= 1e-10 * scale

    spec = PcmNoiseSpec()
    wins = 0
    for rep in range(100):
        w = stream.standard_normal((64, 32)) * 0.05
        w[0, :] *= 40.0  # one outlier row dominates every channel max
        if layer_mean_snr(w, spec, "per-tile", 16) > layer_mean_snr(w, spec, "per-channel"):
            wins += 1
    assert wins == 100
    _report("tiling equivalence (2/3/64 up to 256x256) and per-tile SNR dominance (100/100)")


def test_clipping_effect_suite():
    """alpha=3 clipping on 100 Gaussian and 100 heavy-tailed matrices:
    never raises kurtosis, never raises KL-to-uniform, never lowers mean
    programming SNR, never raises 4-bit RTN mean absolute error."""
    spec = PcmNoiseSpec()
    stream = RngStream(6000)
    for kind in ("gaussian", "heavy"):
        for rep in range(100):
            w = stream.standard_normal((256, 128))
            if kind == "heavy":
                mask = stream.uniform(w.shape) < 0.01
                w = np.where(mask, 10.0 * w, w)
            c = clip_weights(w, 3.0)
            before, after = distribution_report(w), distribution_report(c)
            assert after["kurtosis"] <= before["kurtosis"] + 1e-12
            assert after["kl_to_uniform"] <= before["kl_to_uniform"] + 1e-12
            assert layer_mean_snr(c, spec) >= layer_mean_snr(w, spec) - 1e-12
            assert rtn_error_report(c, 4) <= rtn_error_report(w, 4) * (1 + 1e-9)
    _report("clipping effect suite (100 Gaussian + 100 heavy-tailed, 4 properties)")


def test_directional_hwa_experiment():
    """Hardware-aware training beats plain training under frozen
    programming noise (higher mean, lower spread over 10 paired seeds)
    and beats the 4-bit QAT baseline under 1.5x noise. Runtime <= 5 min."""
    t0 = time.monotonic()
    spec = ClusterSpec()
    teacher, _, train_x, task = build_cluster_experiment(spec, 0)
    students = {}
    for mode in ("hwa", "plain", "qat-baseline"):
        cfg = TrainConfig(mode=mode, epochs=2, batch_size=64, lr=1e-3)
        students[mode] = train_cluster_student(teacher, train_x, spec, cfg, 0).model

    pcm = PcmNoiseSpec()
    hwa = eval_noisy(students["hwa"], task, pcm, seeds=10, master_seed=0)
    plain = eval_noisy(students["plain"], task, pcm, seeds=10, master_seed=0)
    assert hwa.mean > plain.mean
    assert hwa.std < plain.std

    scaled = pcm.scaled(1.5)
    hwa_scaled = eval_noisy(students["hwa"], task, scaled, seeds=10, master_seed=0)
    qat_scaled = eval_noisy(students["qat-baseline"], task, scaled, seeds=10, master_seed=0)
    assert hwa_scaled.mean > qat_scaled.mean

    elapsed = time.monotonic() - t0
    assert elapsed < 300.0
    _report(
        f"directional hardware-aware experiment "
        f"(hwa {hwa.mean:.4f}+/-{hwa.std:.4f} vs plain {plain.mean:.4f}+/-{plain.std:.4f}; "
        f"1.5x noise hwa {hwa_scaled.mean:.4f} vs qat {qat_scaled.mean:.4f}; {elapsed:.1f}s)"
    )


def _steps_to_threshold(mode: str, seed: int) -> int:
    spec = ClusterSpec(outlier_scale=0.0, clip_alpha=1e6, gamma_weight=0.03,
                       train_samples=512, eval_samples=64)
    teacher, _, train_x, _ = build_cluster_experiment(spec, seed)
    student = student_from_teacher(teacher, spec)
    pert = RngStream(seed).split("perturb")
    for lin in student.analog:
        lin.weight += 0.3 * pert.standard_normal(lin.weight.shape)
    cfg = TrainConfig(mode=mode, epochs=8, batch_size=64, lr=1e-2, weight_decay=0.0)
    res = train(student, teacher, train_x, cfg, RngStream(seed).split("train"))
    threshold = 0.3 * res.loss_trace[0]
    hits = np.nonzero(res.loss_trace <= threshold)[0]
    return int(hits[0]) if hits.size else len(res.loss_trace)


def test_convergence_slower_with_nonidealities():
    """Noise injection + output quantization slow convergence: the
    noisy arm needs strictly more steps than the clean arm to reach 30%
    of its initial loss, on each of 5 paired seeds."""
    pairs = []
    for seed in range(5):
        hwa = _steps_to_threshold("hwa", seed)
        plain = _steps_to_threshold("plain", seed)
        assert hwa > plain, f"seed {seed}: noisy arm {hwa} steps vs clean arm {plain}"
        pairs.append((hwa, plain))
    _report(f"convergence slowdown under nonidealities (5 paired seeds, steps {pairs})")


def test_ttc_oracle_equivalence():
    """All three answer-selection strategies match a brute-force oracle
    on 1000 random instances; the worked reward example reproduces the
    hand results; at n=1 every strategy collapses to the same curve."""
    stream = RngStream(7000)
    for _ in range(1000):
        n = 1 + int(stream.uniform_int(0, 6))
        answers = tuple(f"a{int(stream.uniform_int(0, 3))}" for _ in range(n))
        rewards = tuple(float(r) for r in stream.uniform(n))
        s = TtcSample(0, answers, rewards)

        assert ttc_select([s], "prm-greedy") == [answers[int(np.argmax(rewards))]]

        counts = Counter(answers)
        best = max(counts.values())
        assert ttc_select([s], "majority-vote") == [next(a for a in answers if counts[a] == best)]

        sums: dict[str, float] = {}
        for a, r in zip(answers, rewards):
            sums[a] = sums.get(a, 0.0) + r
        top = max(sums.values())
        assert ttc_select([s], "prm-weighted-vote") == [next(a for a in answers if sums[a] == top)]

    hand = TtcSample(0, ("A", "B", "A"), (0.1, 0.5, 0.3))
    assert ttc_select([hand], "prm-greedy") == ["B"]
    assert ttc_select([hand], "prm-weighted-vote") == ["B"]
    assert ttc_select([hand], "majority-vote") == ["A"]

    samples, gold = make_toy_ttc_samples(30, 8, 0.5, RngStream(7001))
    curve = ttc_curve(samples, gold, n_max=1, reps=6)
    at_one = {strat: curve[strat][1] for strat in curve}
    assert len(set(at_one.values())) == 1
    _report("test-time-compute selection oracle (1000 instances + hand example + n=1 collapse)")


def test_data_generation_contracts():
    """Greedy-prefix positions are stream-invariant across 100 streams;
    filter_fraction=0.2 matches the sort-and-cut oracle; softmax sampling
    from a one-hot (near-deterministic) teacher is deterministic."""
    teacher = TinyTransformer.build(vocab_size=9, dim=8, max_seq_len=8, ff_dim=16,
                                    stream=RngStream(8000))
    spec = GenSpec(strategy="RGS", sequence_length=7, greedy_prefix_len=5)
    by_first = {}
    for k in range(100):
        ds = generate_sequences(teacher, spec, 1, RngStream(9000 + k))
        by_first.setdefault(int(ds.tokens[0, 0]), set()).add(tuple(ds.tokens[0, 1:5].tolist()))
    assert all(len(v) == 1 for v in by_first.values())  # greedy continuation fixed per first token

    full = generate_sequences(teacher, GenSpec(strategy="SSS", sequence_length=6), 10, RngStream(9500))
    kept = generate_sequences(teacher, GenSpec(strategy="SSS", sequence_length=6, filter_fraction=0.2),
                              10, RngStream(9500))
    drop = np.argsort(full.log_probs, kind="stable")[:2]
    keep = [i for i in range(10) if i not in set(drop.tolist())]
    np.testing.assert_array_equal(kept.tokens, full.tokens[keep])

    sharp = TinyTransformer.build(vocab_size=9, dim=8, max_seq_len=8, ff_dim=16,
                                  stream=RngStream(8001))
    sharp.analog[-1].weight *= 2000.0  # near-one-hot output distribution
    rows = {tuple(generate_sequences(sharp, GenSpec(strategy="SSS", sequence_length=6), 1,
                                     RngStream(9600 + k)).tokens[0].tolist())
            for k in range(50)}
    assert len(rows) == 1
    _report("data-generation contracts (greedy invariance, filter oracle, one-hot determinism)")


def test_end_to_end_reproducibility(tmp_path):
    """train + eval + sweep-noise with a fixed master seed produce
    byte-identical CSV/JSON outputs across two independent runs."""
    outputs = []
    for run_dir in ("run1", "run2"):
        d = tmp_path / run_dir
        d.mkdir()
        ckpt = d / "student.ckpt"
        assert main(["train", "--task", "cluster", "--out", str(ckpt), "--seed", "1",
                     "--train-samples", "512", "--epochs", "1"]) == EXIT_OK
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(d / "eval"),
                     "--seed", "1", "--seeds", "4", "--master-seed", "0",
                     "--train-samples", "512"]) == EXIT_OK
        assert main(["sweep-noise", "--checkpoint", str(ckpt), "--out", str(d / "sweep"),
                     "--axis", "scale", "--points", "0.5,1.0", "--seeds", "3",
                     "--seed", "1", "--train-samples", "512"]) == EXIT_OK
        blob = b"".join(
            Path(d / name).read_bytes()
            for name in ("student.ckpt", "eval.csv", "eval.json", "sweep.csv", "sweep.json")
        )
        outputs.append(blob)
    assert outputs[0] == outputs[1]
    _report("end-to-end reproducibility (train + eval + sweep byte-identical)")
