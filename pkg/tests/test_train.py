"""Config handling, batched-objective consistency, training endpoints,
pipeline determinism, and the grid runner."""

import json

import numpy as np
import pytest

from conftest import random_probs, random_target

from desorec import loss as losses
from desorec.errors import ContractViolation
from desorec.model import init_params
from desorec.softlabel import generate_onehot
from desorec.train import (
    Dataset,
    ExperimentConfig,
    RunReport,
    batch_loss_and_grad,
    build_soft_targets,
    grid_search,
    load_dataset,
    pretrain,
    run_experiment,
    train_final,
)

SYNTH = dict(kind="synth", n_users=60, n_items=24, n_clusters=4,
             events_per_user=12, noise=0.2, seed=0)


def small_config(**overrides):
    base = dict(dataset=SYNTH, model_kind="dot_factorization", d=8,
                pretrain_epochs=2, train_epochs=3, batch_size=64,
                seed=1)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_generator_none_requires_ce(self):
        with pytest.raises(ValueError):
            ExperimentConfig(mode="DECOUPLED", generator="NONE")

    def test_lp_parameter_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(mode="COUPLED", generator="LP", tau=0.0)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError) as err:
            ExperimentConfig.from_dict({"learning_rate": 0.1})
        assert "learning_rate" in str(err.value)

    def test_file_round_trip(self, tmp_path):
        cfg = small_config(mode="COUPLED", generator="LS", lambda1=0.3)
        path = tmp_path / "config.json"
        cfg.save(path)
        loaded = ExperimentConfig.from_file(path)
        assert loaded == cfg

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            ExperimentConfig(lambda1=1.5)

    def test_label(self):
        assert small_config().label() == "CE"
        assert small_config(mode="DECOUPLED", generator="LP").label() == "DECOUPLED+LP"


class TestBatchObjective:
    """The vectorized batch path must match the per-sample operations."""

    @pytest.mark.parametrize("mode", ["CE", "LS", "COUPLED", "DECOUPLED"])
    def test_matches_per_sample(self, mode, rng):
        for _ in range(10):
            n, m = 6, int(rng.integers(4, 10))
            z = rng.normal(size=(n, m))
            shifted = z - z.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            probs = np.exp(log_probs)
            ys = rng.integers(0, m, size=n)
            targets = [random_target(rng, m, int(y)) for y in ys]
            cfg = losses.LossConfig(mode=mode, lambda1=float(rng.uniform(0, 1)),
                                    lambda2=float(rng.uniform(0, 1)))
            batch_loss, batch_grad = batch_loss_and_grad(
                probs, log_probs, ys, targets, cfg)
            expected_losses, expected_grads = [], []
            for i in range(n):
                value, grad = losses.compute_loss(probs[i], targets[i],
                                                  int(ys[i]), cfg)
                expected_losses.append(value)
                expected_grads.append(grad)
            assert batch_loss == pytest.approx(np.mean(expected_losses), rel=1e-10)
            np.testing.assert_allclose(batch_grad, np.array(expected_grads) / n,
                                       atol=1e-12)

    def test_smoothing_targets_in_batch(self, rng):
        m, n = 8, 4
        probs = np.stack([random_probs(rng, m) for _ in range(n)])
        log_probs = np.log(probs)
        ys = rng.integers(0, m, size=n)
        targets = [losses.make_uniform_smoothing(int(y), m, 0.1) for y in ys]
        cfg = losses.LossConfig(mode="COUPLED", lambda1=0.5)
        batch_loss, _ = batch_loss_and_grad(probs, log_probs, ys, targets, cfg)
        expected = np.mean([losses.coupled_loss(probs[i], targets[i],
                                                int(ys[i]), 0.5)[0]
                            for i in range(n)])
        assert batch_loss == pytest.approx(expected, rel=1e-10)


class TestPretrain:
    def test_zero_epochs_returns_init(self):
        cfg = small_config(pretrain_epochs=0)
        data = load_dataset(cfg)
        params = pretrain(cfg, data)
        fresh = init_params(cfg.model_kind, data.item_count, data.user_count,
                            cfg.d, cfg.seed)
        np.testing.assert_array_equal(params.item_out, fresh.item_out)

    def test_deterministic(self):
        cfg = small_config(pretrain_epochs=3)
        a = pretrain(cfg, load_dataset(cfg))
        b = pretrain(cfg, load_dataset(cfg))
        np.testing.assert_array_equal(a.item_out, b.item_out)
        np.testing.assert_array_equal(a.user_emb, b.user_emb)

    def test_planted_structure_is_learnable(self):
        """Noise-free planted clusters support strong ranking after a
        short hard-label run."""
        cfg = ExperimentConfig(
            dataset=dict(kind="synth", n_users=64, n_items=32, n_clusters=8,
                         events_per_user=30, noise=0.0, seed=0),
            model_kind="dot_factorization", d=16, pretrain_epochs=20, seed=0)
        data = load_dataset(cfg)
        params = pretrain(cfg, data)
        from desorec.metrics import evaluate
        result = evaluate(params, data.splits.valid, ks=(10,))
        assert result.ndcg[10] >= 0.5


class TestBuildTargets:
    def test_none_is_onehot(self):
        cfg = small_config()
        data = load_dataset(cfg)
        targets = build_soft_targets(cfg, None, data.splits.train,
                                     num_items=data.item_count)
        assert targets.generator == "NONE"
        assert all(t.q_y == 1.0 for t in targets.targets.values())

    def test_ls_confidence_formula(self):
        cfg = small_config(mode="LS", generator="LS", epsilon=0.1)
        data = load_dataset(cfg)
        targets = build_soft_targets(cfg, None, data.splits.train,
                                     num_items=data.item_count)
        m = data.item_count
        expected = 1.0 - 0.1 * (m - 1) / m
        for t in targets.targets.values():
            assert t.q_y == pytest.approx(expected, abs=1e-12)

    def test_lp_needs_pretrained(self):
        cfg = small_config(mode="DECOUPLED", generator="LP", k=4)
        data = load_dataset(cfg)
        with pytest.raises(ContractViolation):
            build_soft_targets(cfg, None, data.splits.train,
                               num_items=data.item_count)

    def test_lp_invariants(self):
        cfg = small_config(mode="DECOUPLED", generator="LP", k=4,
                           pretrain_epochs=2)
        data = load_dataset(cfg)
        params = pretrain(cfg, data)
        targets = build_soft_targets(cfg, params, data.splits.train,
                                     num_items=data.item_count)
        assert len(targets) == len(data.splits.train)
        from desorec.loss import validate_soft_target
        for t in targets.targets.values():
            validate_soft_target(t)
            assert t.q_y >= 0.5


class TestTrainFinal:
    def test_ce_equals_coupled_lambda1_zero(self):
        """Same seed, mode CE vs COUPLED at lambda1 = 0: identical loss
        trajectory batch for batch."""
        data = load_dataset(small_config())
        targets = generate_onehot(data.splits.train, data.item_count)
        _, r_ce = train_final(small_config(train_epochs=3), data, targets)
        cfg2 = small_config(train_epochs=3, mode="COUPLED", generator="LS",
                            lambda1=0.0)
        _, r_cpl = train_final(cfg2, data, targets)
        assert r_ce.first_batch_loss == pytest.approx(r_cpl.first_batch_loss,
                                                      rel=1e-12)
        for a, b in zip(r_ce.epochs, r_cpl.epochs):
            assert a["train_loss"] == pytest.approx(b["train_loss"], rel=1e-9)

    def test_lambda2_one_is_pure_target_confidence(self, rng):
        """Batch loss under DECOUPLED, lambda2 = 1 equals the mean
        target-confidence KL from the decomposition."""
        m, n = 10, 5
        probs = np.stack([random_probs(rng, m) for _ in range(n)])
        log_probs = np.log(probs)
        ys = rng.integers(0, m, size=n)
        targets = [random_target(rng, m, int(y)) for y in ys]
        cfg = losses.LossConfig(mode="DECOUPLED", lambda1=0.6, lambda2=1.0)
        batch_loss, _ = batch_loss_and_grad(probs, log_probs, ys, targets, cfg)
        expected = np.mean([
            losses.decompose(probs[i], targets[i], int(ys[i]), 0.6).kl_target
            for i in range(n)])
        assert batch_loss == pytest.approx(expected, rel=1e-10)

    def test_debug_checks_run_clean(self):
        cfg = small_config(mode="DECOUPLED", generator="LP", k=4,
                           lambda2=1.0, pretrain_epochs=1, train_epochs=2,
                           debug_checks=True)
        report = run_experiment(cfg)
        assert report.best_epoch >= 1
        # the lambda1=0 endpoint assertion also runs live
        cfg2 = small_config(mode="COUPLED", generator="LS", lambda1=0.0,
                            train_epochs=1, debug_checks=True)
        assert run_experiment(cfg2).best_epoch >= 1

    def test_missing_target_rejected(self):
        data = load_dataset(small_config())
        targets = generate_onehot(data.splits.train[:-1], data.item_count)
        cfg = small_config(mode="COUPLED", generator="LS")
        with pytest.raises(ContractViolation):
            train_final(cfg, data, targets)

    def test_early_stop_returns_best(self):
        cfg = small_config(train_epochs=8, patience=2)
        data = load_dataset(cfg)
        targets = generate_onehot(data.splits.train, data.item_count)
        _, report = train_final(cfg, data, targets)
        best_seen = max(row["valid_ndcg"] for row in report.epochs)
        assert report.best_valid_ndcg == pytest.approx(best_seen, abs=1e-12)
        assert len(report.epochs) <= 8

    def test_warm_start_uses_checkpoint(self):
        cfg = small_config(warm_start=True, pretrain_epochs=1, train_epochs=1)
        data = load_dataset(cfg)
        pre = pretrain(cfg, data)
        targets = generate_onehot(data.splits.train, data.item_count)
        with pytest.raises(ContractViolation):
            train_final(cfg, data, targets, pretrained=None)
        params, _ = train_final(cfg, data, targets, pretrained=pre)
        assert params is not pre


class TestRunExperiment:
    def test_report_shape_and_round_trip(self):
        cfg = small_config(train_epochs=3)
        report = run_experiment(cfg)
        assert len(report.epochs) <= 3
        assert [row["epoch"] for row in report.epochs] == \
            list(range(1, len(report.epochs) + 1))
        for key in ("R@20", "N@20", "R@10", "N@10"):
            assert 0.0 <= report.test_metrics[key] <= 1.0
        back = RunReport.from_json(report.to_json())
        assert back.test_metrics == report.test_metrics
        assert back.epochs == report.epochs
        assert back.config == report.config

    def test_deterministic(self):
        cfg = small_config(mode="COUPLED", generator="POP", lambda1=0.4,
                           train_epochs=3)
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert a.test_metrics == b.test_metrics
        assert [r["train_loss"] for r in a.epochs] == \
            [r["train_loss"] for r in b.epochs]

    def test_summary_line(self):
        report = run_experiment(small_config(train_epochs=1))
        parts = report.summary_line().split(",")
        assert parts[0] == "CE"
        assert len(parts) == 6

    def test_desk_scale_pipeline_budget(self):
        """The full pipeline at 500 users / 200 items / d=16 stays well
        inside a minute."""
        import time
        cfg = ExperimentConfig(
            dataset=dict(kind="synth", n_users=500, n_items=200, n_clusters=4,
                         events_per_user=20, noise=0.3, seed=0),
            model_kind="dot_factorization", d=16, mode="DECOUPLED",
            generator="LP", k=4, pretrain_epochs=20, train_epochs=30,
            patience=5, seed=0)
        started = time.perf_counter()
        report = run_experiment(cfg)
        assert time.perf_counter() - started < 60.0
        assert report.best_epoch >= 1


class TestGridSearch:
    def test_empty_grid_single_run(self):
        cells = grid_search(small_config(train_epochs=1), {})
        assert len(cells) == 1
        assert cells[0]["report"] is not None

    def test_lambda2_ablation_arms(self):
        base = small_config(mode="DECOUPLED", generator="POP", lambda1=0.5,
                            train_epochs=2)
        cells = grid_search(base, {"lambda2": [0.0, 1.0]})
        assert len(cells) == 2
        assert all(c["error"] is None for c in cells)
        seen = sorted(c["overrides"]["lambda2"] for c in cells)
        assert seen == [0.0, 1.0]

    def test_poisoned_cell_isolated(self):
        base = small_config(mode="DECOUPLED", generator="POP", train_epochs=1)
        cells = grid_search(base, {"lambda2": [0.5, 2.0]})
        errors = [c for c in cells if c["error"] is not None]
        ok = [c for c in cells if c["report"] is not None]
        assert len(errors) == 1 and len(ok) == 1
        assert cells[0]["report"] is not None  # sorted: ok cells first

    def test_unknown_grid_key(self):
        with pytest.raises(ValueError):
            grid_search(small_config(), {"nope": [1]})

    def test_sorted_by_valid_metric(self):
        base = small_config(mode="COUPLED", generator="LS", train_epochs=2)
        cells = grid_search(base, {"lambda1": [0.1, 0.5, 0.9]})
        values = [c["valid_ndcg"] for c in cells]
        assert values == sorted(values, reverse=True)

    def test_parallel_jobs_match_sequential(self):
        base = small_config(mode="COUPLED", generator="LS", train_epochs=1)
        grid = {"lambda1": [0.2, 0.8]}
        seq = grid_search(base, grid, jobs=1)
        par = grid_search(base, grid, jobs=2)
        seq_metrics = {tuple(c["overrides"].items()): c["report"].test_metrics
                       for c in seq}
        par_metrics = {tuple(c["overrides"].items()): c["report"].test_metrics
                       for c in par}
        assert seq_metrics == par_metrics
