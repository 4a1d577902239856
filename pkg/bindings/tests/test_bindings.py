import json
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from aimcsim.cli import EXIT_OK, main
from aimcsim.experiments import ClusterSpec, build_cluster_experiment
from aimcsim.harness import eval_noisy
from aimcsim.layer import AnalogLayerConfig, forward
from aimcsim.noise import PcmNoiseSpec, TrainNoiseSpec, pcm_sigma_pct
from aimcsim.quantizers import InputRangeState
from aimcsim.streams import RngStream

from aimcsim_bindings import (
    BindingError,
    BoundLayerHandle,
    bind_backward,
    bind_deploy_and_eval,
    bind_forward,
    open_layer,
    open_model,
)

TOY_CKPT = Path(__file__).parent / "data" / "toy.ckpt"

# the configuration the bundled checkpoint was trained and evaluated with
TOY_ARGS = ["--seed", "1", "--train-samples", "512"]


def plain_config(n_in=4, n_out=3, **kw) -> AnalogLayerConfig:
    return AnalogLayerConfig(n_in, n_out, **kw)


class TestHandleLifecycle:
    def test_owns_copies_never_aliases(self):
        w = np.ones((4, 3))
        h = open_layer(plain_config(), w)
        w[0, 0] = 99.0
        assert h.weights()[0, 0] == 1.0
        h2 = h.clone()
        assert not np.shares_memory(h.weights(), h2.weights())
        h.close()
        assert not h2.closed  # clones survive the original

    def test_closed_handle_rejects_operations(self):
        h = open_layer(plain_config(), np.ones((4, 3)))
        h.close()
        with pytest.raises(BindingError, match="closed"):
            bind_forward(h, np.ones((1, 4)))

    def test_context_manager_closes(self):
        with open_layer(plain_config(), np.ones((4, 3))) as h:
            bind_forward(h, np.ones((1, 4)))
        assert h.closed

    def test_weight_shape_validated(self):
        with pytest.raises(BindingError, match="expected \\(4, 3\\)"):
            open_layer(plain_config(), np.ones((3, 4)))


class TestBindForward:
    def test_identity_layer_returns_input(self):
        h = open_layer(plain_config(3, 3), np.eye(3))
        x = RngStream(0).standard_normal((5, 3))
        np.testing.assert_array_equal(bind_forward(h, x), x)

    def test_matches_kernel_bitwise(self):
        cfg = plain_config(6, 4, input_quant_enabled=True, output_quant_enabled=True,
                           input_range=InputRangeState(beta=2.0))
        w = RngStream(1).standard_normal((6, 4))
        x = RngStream(2).standard_normal((7, 6))
        h = open_layer(cfg, w)
        expected, _ = forward(x, cfg, w, mode="eval")
        np.testing.assert_array_equal(bind_forward(h, x), expected)

    def test_train_noise_parity_under_same_stream(self):
        cfg = plain_config(5, 3, train_noise=TrainNoiseSpec(gamma_weight=0.1, beta_weight=0.0))
        w = RngStream(3).standard_normal((5, 3))
        x = RngStream(4).standard_normal((2, 5))
        h = open_layer(cfg, w)
        got = bind_forward(h, x, mode="train", stream=RngStream(8))
        expected, _ = forward(x, cfg, w, mode="train", stream=RngStream(8))
        np.testing.assert_array_equal(got, expected)

    def test_shape_error_reports_expected_vs_actual(self):
        h = open_layer(plain_config(4, 3), np.ones((4, 3)))
        with pytest.raises(BindingError, match=r"expected \(\*, 4\), got \(1, 5\)"):
            bind_forward(h, np.ones((1, 5)))

    def test_dtype_error(self):
        h = open_layer(plain_config(4, 3), np.ones((4, 3)))
        with pytest.raises(BindingError, match="float64"):
            bind_forward(h, np.ones((1, 4), dtype=np.float32))

    def test_noncontiguous_copied_with_warning(self):
        h = open_layer(plain_config(4, 3), np.ones((4, 3)))
        x = np.asarray(RngStream(5).standard_normal((4, 8)).T)  # transposed view
        assert not x.flags["C_CONTIGUOUS"]
        with pytest.warns(UserWarning, match="contiguous"):
            y = bind_forward(h, x)
        np.testing.assert_array_equal(y, x @ np.ones((4, 3)))

    def test_memory_stable_over_1k_calls(self):
        h = open_layer(plain_config(16, 16), RngStream(6).standard_normal((16, 16)))
        x = RngStream(7).standard_normal((8, 16))
        for _ in range(50):  # warm up allocator and caches
            bind_forward(h, x)
        tracemalloc.start()
        base, _ = tracemalloc.get_traced_memory()
        for _ in range(1000):
            bind_forward(h, x)
        current, _ = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert current - base < 256 * 1024  # no growth beyond allocator noise


class TestBindBackward:
    def test_matches_kernel(self):
        cfg = plain_config(5, 4, input_quant_enabled=True,
                           input_range=InputRangeState(beta=1.0))
        w = RngStream(9).standard_normal((5, 4))
        x = RngStream(10).standard_normal((3, 5))
        g = RngStream(11).standard_normal((3, 4))
        h = open_layer(cfg, w)
        bind_forward(h, x, mode="train")
        gx, gw, gb = bind_backward(h, g)
        _, cache = forward(x, cfg, w, mode="train")
        from aimcsim.layer import backward
        ex, ew, eb = backward(g, cache)
        np.testing.assert_array_equal(gx, ex)
        np.testing.assert_array_equal(gw, ew)
        assert gb == eb

    def test_requires_prior_forward(self):
        h = open_layer(plain_config(4, 3), np.ones((4, 3)))
        with pytest.raises(BindingError, match="bind_forward"):
            bind_backward(h, np.ones((1, 3)))


class TestDeployAndEval:
    def test_invalid_noise_spec(self):
        h = open_layer(plain_config(4, 3), np.ones((4, 3)))
        with pytest.raises(BindingError, match="invalid noise spec"):
            bind_deploy_and_eval(h, object(), 2, x=np.ones((1, 4)))

    def test_single_seed_is_deterministic(self):
        h = open_layer(plain_config(4, 3), RngStream(12).standard_normal((4, 3)))
        x = RngStream(13).standard_normal((2, 4))
        a = bind_deploy_and_eval(h, PcmNoiseSpec(), 1, x=x, master_seed=5)
        b = bind_deploy_and_eval(h, PcmNoiseSpec(), 1, x=x, master_seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        assert len(a) == 1

    def test_noise_std_matches_programming_model(self):
        # many deployments of a wide layer: the per-element spread matches
        # sigma(g) from the programming-noise polynomial
        n = 4000
        w = np.full((2, n), 0.5)
        w[0, :] = 1.0  # per-channel reference
        h = open_layer(plain_config(2, n), w)
        x = np.array([[0.0, 1.0]])  # reads out the second row directly
        outs = bind_deploy_and_eval(h, PcmNoiseSpec(), 40, x=x, master_seed=3)
        samples = np.concatenate([o.ravel() for o in outs]) - 0.5
        expected = pcm_sigma_pct(50.0, PcmNoiseSpec()) / 100.0
        assert np.std(samples) == pytest.approx(expected, rel=0.02)

    def test_model_eval_parity_with_harness(self):
        spec = ClusterSpec(train_samples=512)
        _, _, _, task = build_cluster_experiment(spec, 1)
        m = open_model(TOY_CKPT)
        got = bind_deploy_and_eval(m, PcmNoiseSpec(), 6, x=task.x, labels=task.labels,
                                   master_seed=0)
        report = eval_noisy(m._model, task, PcmNoiseSpec(), seeds=6, master_seed=0)
        assert got == report.per_seed

    def test_model_eval_parity_with_cli(self, tmp_path):
        out = tmp_path / "cli-eval"
        code = main(["eval", "--checkpoint", str(TOY_CKPT), "--out", str(out),
                     "--seeds", "6", "--master-seed", "0"] + TOY_ARGS)
        assert code == EXIT_OK
        cli_report = json.loads(Path(str(out) + ".json").read_text())[0]

        spec = ClusterSpec(train_samples=512)
        _, _, _, task = build_cluster_experiment(spec, 1)
        with open_model(TOY_CKPT) as m:
            got = bind_deploy_and_eval(m, PcmNoiseSpec(), 6, x=task.x, labels=task.labels,
                                       master_seed=0)
        assert got == cli_report["per_seed"]  # bit-for-bit parity

    def test_forward_parity_with_checkpoint_layer(self):
        with open_model(TOY_CKPT) as m:
            h = m.layer(0)
            x = RngStream(14).standard_normal((3, h.in_features))
            y = bind_forward(h, x)
            lin = m._model.analog[0]
            expected, _ = forward(x, lin.config, lin.weight, mode="eval")
        np.testing.assert_array_equal(y, expected)

    def test_layer_handle_needs_x(self):
        h = open_layer(plain_config(4, 3), np.ones((4, 3)))
        with pytest.raises(BindingError, match="needs x"):
            bind_deploy_and_eval(h, PcmNoiseSpec(), 2)

    def test_seed_count_validated(self):
        h = open_layer(plain_config(4, 3), np.ones((4, 3)))
        with pytest.raises(BindingError, match="seeds"):
            bind_deploy_and_eval(h, PcmNoiseSpec(), 0, x=np.ones((1, 4)))
