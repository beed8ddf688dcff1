import numpy as np
import pytest

from adafgrad import (
    ConfigurationError,
    LossWeights,
    OptimizerState,
    RehearsalBuffer,
    RunConfig,
    SlideFeatures,
    SyntheticSpec,
    evaluate_random_baseline,
    init_params,
    run_sequence,
    synth_sequence,
    train_task,
)
from adafgrad.engine import config_from_dict, report_from_dict
from adafgrad.model import ModelDims, params_checksum


@pytest.fixture(scope="module")
def small_benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    spec = SyntheticSpec(class_counts=[2, 2], slides_per_class=20,
                         n_regions_range=(3, 6), d_vis=12, c_text=8)
    _, manifest, _ = synth_sequence(spec, 21, root)
    return manifest


def _micro_task(seed, n_per_class=20, d_vis=8):
    """A separable two-class task: strong means, light noise."""
    gen = np.random.default_rng(seed)
    mu = {0: np.zeros(d_vis), 1: np.zeros(d_vis)}
    mu[0][0] = 1.0
    mu[1][1] = 1.0
    slides = []
    for c in (0, 1):
        for i in range(n_per_class):
            n_r = int(gen.integers(3, 7))
            regions = mu[c] + 0.3 * gen.normal(size=(n_r, d_vis))
            patches = regions[:, None, :] + 0.2 * gen.normal(size=(n_r, 1, d_vis))
            slides.append(SlideFeatures(
                slide_id=f"c{c}i{i}", task_index=0, class_in_task=c,
                global_class=c, regions=regions, patches=patches))
    return slides


class TestTrainTask:
    def test_finetune_logs_only_ce(self, small_benchmark):
        cfg = RunConfig(method="finetune", epochs_per_task=1, seed=0)
        _, report, _ = run_sequence(cfg, small_benchmark)
        assert report.loss_log
        for row in report.loss_log:
            assert row["ce"] is not None
            assert row["infonce"] is None
            assert row["self_sim"] is None
            assert row["replay_ce"] is None
            assert row["ppgd"] is None

    def test_deterministic_params(self, small_benchmark):
        cfg = RunConfig(method="adafgrad", seed=5)
        _, _, p1 = run_sequence(cfg, small_benchmark)
        _, _, p2 = run_sequence(cfg, small_benchmark)
        assert params_checksum(p1) == params_checksum(p2)

    def test_separable_micro_task_learned_in_two_epochs(self):
        """Pilot-frozen threshold: 2 Gaussian classes, 40 slides, E=2."""
        slides = _micro_task(3)
        dims = ModelDims(d_vis=8, d_model=16, d_attn=16, c_text=8, c_total=2)
        params = init_params(dims, 0)
        opt = OptimizerState.for_params(params)
        cfg = RunConfig(method="finetune", epochs_per_task=2, seed=0)
        rng = np.random.default_rng(0)
        train_task(params, opt, slides, None, RehearsalBuffer(10), cfg, rng)
        from adafgrad import forward
        hits = sum(int(np.argmax(forward(params, s).logits) == s.global_class)
                   for s in slides)
        assert hits / len(slides) >= 0.95

    def test_class_outside_head_rejected(self):
        slides = _micro_task(1)
        slides[0].global_class = 7
        dims = ModelDims(d_vis=8, d_model=4, d_attn=4, c_text=4, c_total=2)
        params = init_params(dims, 0)
        cfg = RunConfig(method="finetune", epochs_per_task=1)
        with pytest.raises(Exception):
            train_task(params, OptimizerState.for_params(params), slides, None,
                       RehearsalBuffer(4), cfg, np.random.default_rng(0))

    def test_buffer_writes_equal_steps(self, small_benchmark):
        cfg = RunConfig(method="finetune", epochs_per_task=2, seed=1)
        slides = small_benchmark.load_split(0, "train")
        dims = ModelDims(d_vis=12, d_model=16, d_attn=16, c_text=8, c_total=4)
        params = init_params(dims, 1)
        buf = RehearsalBuffer(10)
        logs = train_task(params, OptimizerState.for_params(params), slides,
                          None, buf, cfg, np.random.default_rng(1))
        assert buf.n_seen == len(logs) == 2 * len(slides)

    def test_term_gating_matches_er(self, small_benchmark):
        """alpha=beta=lambda=0 makes the full method's trajectory equal er's."""
        gated = RunConfig(method="adafgrad", epochs_per_task=3, seed=9,
                          weights=LossWeights(alpha=0.0, beta=0.0,
                                              lambda_ppgd=0.0))
        er = RunConfig(method="er", epochs_per_task=3, seed=9)
        _, _, p1 = run_sequence(gated, small_benchmark)
        _, _, p2 = run_sequence(er, small_benchmark)
        assert params_checksum(p1) == params_checksum(p2)


class TestRunSequence:
    def test_two_task_matrix_shape(self, small_benchmark):
        cfg = RunConfig(method="finetune", epochs_per_task=1, seed=2)
        matrix, report, _ = run_sequence(cfg, small_benchmark)
        filled = ~np.isnan(matrix.acc)
        # lower triangle plus the pre-training cell acc[0][1]
        assert filled.tolist() == [[True, True], [True, True]]
        assert not np.isnan(matrix.rand).any()
        for key in ("acc", "masked_acc", "auc", "macc", "bwt", "fwt", "fgt"):
            assert report.metrics[key] is not None

    def test_joint_single_row(self, small_benchmark):
        cfg = RunConfig(method="joint", epochs_per_task=1, seed=2)
        matrix, report, _ = run_sequence(cfg, small_benchmark)
        assert matrix.acc.shape == (1, 2)
        assert not np.isnan(matrix.acc).any()
        assert report.metrics["macc"] is None
        assert report.metrics["bwt"] is None
        assert report.metrics["acc"] is not None

    def test_all_losses_finite(self, small_benchmark):
        cfg = RunConfig(method="adafgrad", seed=3)
        _, report, _ = run_sequence(cfg, small_benchmark)
        for row in report.loss_log:
            assert np.isfinite(row["total"])

    def test_report_round_trips(self, small_benchmark):
        import json
        cfg = RunConfig(method="adafgrad", epochs_per_task=1, seed=4)
        _, report, _ = run_sequence(cfg, small_benchmark)
        raw = json.loads(report.to_json())
        back = report_from_dict(raw)
        assert back.metrics == report.metrics
        assert json.loads(back.to_json()) == raw


class TestRandomBaseline:
    def test_zero_head_ties_break_low(self, small_benchmark):
        dims = ModelDims(d_vis=12, d_model=16, d_attn=16, c_text=8, c_total=4)
        params = init_params(dims, 0)
        params.head_w[...] = 0.0
        params.head_b[...] = 0.0
        splits = [small_benchmark.load_split(t, "test") for t in range(2)]
        rand = evaluate_random_baseline(params, splits)
        # all logits zero -> argmax = 0; accuracy = share of true class 0
        for t, slides in enumerate(splits):
            share = np.mean([s.global_class == 0 for s in slides])
            assert rand[t] == share

    def test_repeat_evaluations_identical(self, small_benchmark):
        dims = ModelDims(d_vis=12, d_model=16, d_attn=16, c_text=8, c_total=4)
        params = init_params(dims, 11)
        splits = [small_benchmark.load_split(t, "test") for t in range(2)]
        a = evaluate_random_baseline(params, splits)
        b = evaluate_random_baseline(params, splits)
        np.testing.assert_array_equal(a, b)

    def test_balanced_two_class_near_half_over_seeds(self):
        """Monte-Carlo: mean accuracy over 20 random inits is 0.5 +- 0.05."""
        gen = np.random.default_rng(77)
        slides = _micro_task(77, n_per_class=64)
        dims = ModelDims(d_vis=8, d_model=16, d_attn=16, c_text=8, c_total=2)
        accs = []
        for seed in range(20):
            params = init_params(dims, seed)
            accs.append(evaluate_random_baseline(params, [slides])[0])
        assert abs(float(np.mean(accs)) - 0.5) <= 0.05


class TestConfig:
    def test_defaults_fill_in(self):
        cfg = config_from_dict({}, method="adafgrad")
        assert cfg.weights.alpha == 0.01
        assert cfg.weights.beta == 0.001
        assert cfg.weights.gamma == 0.2
        assert cfg.weights.lambda_ppgd == 0.1
        assert cfg.buffer_capacity == 10
        assert cfg.epochs == 2

    def test_baseline_epoch_default(self):
        assert config_from_dict({}, method="finetune").epochs == 10
        assert config_from_dict({"epochs_per_task": 3}, method="finetune").epochs == 3

    def test_top_level_weight_keys(self):
        cfg = config_from_dict({"alpha": 0.5, "seed": 3}, method="er")
        assert cfg.weights.alpha == 0.5 and cfg.seed == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"bogus": 1})

    def test_bad_method_rejected(self):
        with pytest.raises(ConfigurationError):
            RunConfig(method="sgd")
