import numpy as np
import pytest

from sharpcomp.datasets import synth_gaussian_mixture
from sharpcomp.errors import ContractViolation, UndefinedCorrelationError
from sharpcomp.experiments import (SweepGrid, correlation_report, pearson,
                                   records_csv_lines, run_sweep,
                                   standard_metric_hook, sweep_summary)
from sharpcomp.experiments import testset_metrics as eval_testset
from sharpcomp.metrics import evaluate_record, train_subsample
from sharpcomp.trainer import TrainConfig, init_network, train_sgd

ARCH = {"kind": "mlp", "widths": [4, 6, 2], "activation": "tanh"}


@pytest.fixture(scope="module")
def dataset():
    return synth_gaussian_mixture(40, 2, 4, 4.0, seed=17)


@pytest.fixture(scope="module")
def base_config():
    return TrainConfig(learning_rate=0.1, batch_size=8, steps=300,
                       eval_every=150, seed=99, metric_sample_budget=16)


@pytest.fixture(scope="module")
def small_sweep(dataset, base_config):
    grid = SweepGrid(learning_rates=(0.05, 0.1, 0.2), batch_sizes=(8,),
                     seeds=(0, 1, 2, 3, 4), arch=ARCH)
    return run_sweep(grid, base_config, dataset, adaptive_draws=2)


class TestRunSweep:
    def test_grid_counting(self, small_sweep):
        assert len(small_sweep) == 15  # 3 lrs x 1 batch x 5 seeds
        assert all(r.completed for r in small_sweep)
        assert all(r.final is not None for r in small_sweep)

    def test_divergent_run_isolated(self, dataset, base_config):
        grid = SweepGrid(learning_rates=(0.1, 1e4), batch_sizes=(8,),
                         seeds=(0,), arch=ARCH)
        results = run_sweep(grid, base_config, dataset, adaptive_draws=2)
        assert len(results) == 2
        assert results[0].completed
        assert results[1].diverged and results[1].divergence_step is not None

    def test_deterministic_csv_bytes(self, dataset, base_config):
        grid = SweepGrid(learning_rates=(0.1,), batch_sizes=(8,), seeds=(0,),
                         arch=ARCH)
        lines = []
        for _ in range(2):
            res = run_sweep(grid, base_config, dataset, adaptive_draws=2)[0]
            lines.append("\n".join(records_csv_lines(res.descriptor,
                                                     res.records)))
        assert lines[0] == lines[1]

    def test_run_seeds_distinct(self, small_sweep):
        seeds = [r.descriptor.run_seed for r in small_sweep]
        assert len(set(seeds)) == len(seeds)

    def test_parallel_matches_serial(self, dataset, base_config):
        grid = SweepGrid(learning_rates=(0.05, 0.1), batch_sizes=(8,),
                         seeds=(0,), arch=ARCH)
        serial = run_sweep(grid, base_config, dataset, adaptive_draws=2)
        parallel = run_sweep(grid, base_config, dataset, adaptive_draws=2,
                             parallelism=2)
        for a, b in zip(serial, parallel):
            assert a.descriptor == b.descriptor
            assert a.final.sharpness_approx == b.final.sharpness_approx

    def test_empty_grid_rejected(self):
        with pytest.raises(ContractViolation):
            SweepGrid(learning_rates=(), batch_sizes=(8,), seeds=(0,), arch=ARCH)


class TestPearson:
    def test_perfect_positive(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)

    def test_perfect_negative(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_matches_covariance_oracle(self, rng):
        xs = rng.standard_normal(50)
        ys = 0.3 * xs + rng.standard_normal(50)
        got = pearson(xs, ys)
        # independent two-pass covariance formula
        n = len(xs)
        sx, sy = xs.sum(), ys.sum()
        sxx = float(np.sum(xs * xs)) - sx * sx / n
        syy = float(np.sum(ys * ys)) - sy * sy / n
        sxy = float(np.sum(xs * ys)) - sx * sy / n
        assert got == pytest.approx(sxy / np.sqrt(sxx * syy), abs=1e-12)

    def test_too_short(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1, 2], [1, 2])

    def test_zero_variance(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1, 1, 1], [1, 2, 3])


class TestCorrelationReport:
    def test_table_shape_and_symmetry(self, small_sweep):
        table = correlation_report(small_sweep)
        k = len(table.metrics)
        assert table.rho.shape == (k, k)
        assert np.allclose(np.diag(table.rho), 1.0)
        finite = np.isfinite(table.rho)
        assert np.array_equal(finite, finite.T)
        sym = np.where(finite, table.rho, 0.0)
        assert np.allclose(sym, sym.T)
        assert np.all((table.rho[finite] >= -1) & (table.rho[finite] <= 1))

    def test_insufficient_runs(self, small_sweep):
        with pytest.raises(UndefinedCorrelationError):
            correlation_report(small_sweep[:2])

    def test_degenerate_sweep_zero_variance(self, dataset, base_config):
        # identical config repeated: every final metric is identical
        grid = SweepGrid(learning_rates=(0.1,), batch_sizes=(8,), seeds=(0,),
                         arch=ARCH)
        res = run_sweep(grid, base_config, dataset, adaptive_draws=2)
        clones = [res[0], res[0], res[0]]
        with pytest.raises(UndefinedCorrelationError):
            correlation_report(clones, strict=True)

    def test_summary_serializable(self, small_sweep):
        import json

        table = correlation_report(small_sweep)
        payload = sweep_summary(small_sweep, table)
        text = json.dumps(payload, sort_keys=True)
        assert "correlations" in text
        assert payload["bound_violation_count"] == 0


class TestTestsetMetrics:
    def test_perfect_fit_has_no_misclassified_record(self):
        ds = synth_gaussian_mixture(30, 2, 4, 12.0, seed=23)
        net = init_network({"kind": "mlp", "widths": [4, 10, 2],
                            "activation": "tanh"}, seed=23)
        cfg = TrainConfig(learning_rate=0.1, batch_size=8, steps=2500,
                          eval_every=2500, seed=23)
        ckpt = train_sgd(net, ds, cfg)[-1]
        rec_all, rec_mis = eval_testset(ckpt.network, ds, adaptive_draws=2)
        assert rec_all.n_samples == len(ds.test_idx)
        assert rec_mis is None

    def test_underfit_model_has_both_records(self):
        ds = synth_gaussian_mixture(30, 2, 4, 1.0, seed=29)  # heavy overlap
        net = init_network({"kind": "mlp", "widths": [4, 6, 2],
                            "activation": "tanh"}, seed=29)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, steps=150,
                          eval_every=150, seed=29)
        ckpt = train_sgd(net, ds, cfg)[-1]
        rec_all, rec_mis = eval_testset(ckpt.network, ds, adaptive_draws=2)
        assert rec_mis is not None
        assert rec_mis.n_samples + rec_all.n_samples <= 2 * len(ds.test_idx)
        # reported, not asserted as an invariant: misclassified sharpness
        assert rec_mis.sharpness_approx > 0

    def test_train_selector_reproduces_training_record(self, dataset):
        net = init_network(ARCH, seed=31)
        cfg = TrainConfig(learning_rate=0.1, batch_size=8, steps=100,
                          eval_every=100, seed=31, metric_sample_budget=12)
        hook = standard_metric_hook(dataset, cfg.metric_sample_budget,
                                    cfg.seed, adaptive_draws=2)
        ckpt = train_sgd(net, dataset, cfg, metric_hook=hook)[-1]
        sample_set = train_subsample(dataset, cfg.metric_sample_budget, cfg.seed)
        rec = evaluate_record(ckpt.network,
                              dataset.inputs[sample_set.indices],
                              dataset.targets[sample_set.indices],
                              step=ckpt.step, adaptive_draws=2, seed=cfg.seed)
        for name in ("sharpness_approx", "mls", "nmls", "lvr_mean_log",
                     "local_dim", "mls_bound", "nmls_bound"):
            assert getattr(rec, name) == pytest.approx(
                getattr(ckpt.record, name), rel=1e-12)

    def test_empty_test_split_rejected(self):
        ds = synth_gaussian_mixture(10, 2, 4, 4.0, seed=1, train_fraction=1.0)
        net = init_network(ARCH, seed=1)
        with pytest.raises(ContractViolation):
            eval_testset(net, ds)
