"""Acceptance suite: exact identities, oracle equivalences, and the
directional end-to-end experiments, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see one line per
criterion.
"""

import time

import numpy as np
import pytest

from conftest import random_probs, random_target

from desorec import loss as losses
from desorec import metrics, model, report as reporting, softlabel
from desorec.dataio import Sample, synth_generate, write_events
from desorec.train import (
    ExperimentConfig,
    grid_search,
    load_dataset,
    run_experiment,
)


def announce(number, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"{status} criterion {number} ({name}): {detail}")
    assert ok, f"criterion {number} failed: {detail}"


def test_criterion_1_decomposition_identity():
    """Splitting the coupled loss leaves a model-free remainder and the
    same logit gradient, over >= 1000 random instances."""
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    max_constant_drift = 0.0
    max_grad_residual = 0.0
    for _ in range(1000):
        m = int(rng.integers(3, 11))
        y = int(rng.integers(m))
        q = random_target(rng, m, y)
        lam1 = float(rng.uniform(0, 1))
        p1 = random_probs(rng, m)
        p2 = random_probs(rng, m)
        c1 = losses.decompose(p1, q, y, lam1).label_constant
        c2 = losses.decompose(p2, q, y, lam1).label_constant
        max_constant_drift = max(max_constant_drift, abs(c1 - c2))
        _, residual = losses.verify_decomposition(p1, q, y, lam1, tol=1e-6)
        max_grad_residual = max(max_grad_residual, residual)
    elapsed = time.perf_counter() - started
    ok = (max_constant_drift <= 1e-9 and max_grad_residual <= 1e-6
          and elapsed < 5.0)
    announce(1, "decomposition identity", ok,
             f"constant drift {max_constant_drift:.2e} (tol 1e-9), "
             f"gradient residual {max_grad_residual:.2e} (tol 1e-6), "
             f"{elapsed:.1f}s (< 5s)")


def test_criterion_2_redline_equivalence():
    """At the coupled-equivalent lambda2, the decoupled gradient is that
    lambda2 times the coupled gradient, per sample."""
    rng = np.random.default_rng(202)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(3, 11))
        y = int(rng.integers(m))
        q = random_target(rng, m, y)
        lam1 = float(rng.uniform(0, 1))
        worst = max(worst, losses.redline_residual(random_probs(rng, m), q, y, lam1))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-8 and elapsed < 1.0
    announce(2, "coupled-equivalence rescaling", ok,
             f"max residual {worst:.2e} (tol 1e-8), {elapsed:.2f}s (< 1s)")


def test_criterion_3_gradient_correctness():
    """Every loss mode on both model kinds agrees with central finite
    differences through all parameters."""
    rng = np.random.default_rng(303)
    started = time.perf_counter()
    m, users, d, h = 8, 3, 4, 1e-5
    worst = 0.0
    for kind in model.KINDS:
        for mode in losses.LOSS_MODES:
            params = model.init_params(kind, m, users, d,
                                       seed=int(rng.integers(1 << 30)))
            sample = Sample(sample_id=0, user_id=1,
                            history=np.array([0, 3, 5]), y=2)
            q = random_target(rng, m, sample.y)
            cfg = losses.LossConfig(mode=mode, lambda1=0.7, lambda2=0.3)

            def scalar(ps):
                dist = model.score_and_softmax(ps, model.forward(ps, sample))
                return losses.compute_loss(dist.probs, q, sample.y, cfg)[0]

            dist = model.score_and_softmax(params, model.forward(params, sample))
            _, grad_logits = losses.compute_loss(dist.probs, q, sample.y, cfg)
            grads = model.backward(params, sample, grad_logits)

            dense = {name: np.zeros_like(arr)
                     for name, arr in params.arrays().items()}
            dense["item_out"][:] = grads.item_out
            if grads.user_rows is not None:
                dense["user_emb"][grads.user_rows[0]] = grads.user_rows[1]
            if grads.item_in_rows is not None:
                dense["item_in"][grads.item_in_rows[0]] = grads.item_in_rows[1]
                dense["proj"][:] = grads.proj
                dense["bias"][:] = grads.bias

            for name, arr in params.arrays().items():
                flat = arr.ravel()
                ref_flat = dense[name].ravel()
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    up = scalar(params)
                    flat[idx] = orig - h
                    down = scalar(params)
                    flat[idx] = orig
                    fd = (up - down) / (2 * h)
                    rel = abs(fd - ref_flat[idx]) / max(1.0, abs(fd),
                                                        abs(ref_flat[idx]))
                    worst = max(worst, rel)
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-4 and elapsed < 10.0
    announce(3, "gradient correctness", ok,
             f"max relative error {worst:.2e} (tol 1e-4) across "
             f"{len(model.KINDS) * len(losses.LOSS_MODES)} mode/kind pairs, "
             f"{elapsed:.1f}s (< 10s)")


def test_criterion_4_propagation_invariants():
    """Mass conservation, own-label floor, support confinement, zero-round
    identity, and dense-oracle agreement on 1000 random clusters."""
    rng = np.random.default_rng(404)
    started = time.perf_counter()
    m = 40
    worst_mass = 0.0
    worst_oracle = 0.0
    min_confidence = 1.0
    for _ in range(1000):
        size = int(rng.integers(1, 21))
        X = rng.normal(size=(size, 3))
        tau = float(rng.choice([0.25, 0.5, 1.0, 2.0]))
        rounds = int(rng.integers(1, 6))
        ys = rng.integers(0, m, size=size)
        pairs = [(i, int(ys[i])) for i in range(size)]
        weights = softlabel.propagation_weights(X, tau)

        zero = softlabel.propagate(pairs, weights, rounds=0)
        assert all(t.q_y == 1.0 and len(t.items) == 1 for t in zero.values())

        out = softlabel.propagate(pairs, weights, rounds=rounds)
        q0 = np.zeros((size, m))
        q0[np.arange(size), ys] = 1.0
        q = q0.copy()
        for _ in range(rounds):
            q = 0.5 * (weights.w @ q) + 0.5 * q0
        q /= q.sum(axis=1, keepdims=True)
        label_set = set(ys.tolist())
        for i, t in out.items():
            worst_mass = max(worst_mass, abs(t.total_mass() - 1.0))
            min_confidence = min(min_confidence, t.q_y)
            assert set(t.items).issubset(label_set)
            worst_oracle = max(worst_oracle,
                               float(np.abs(t.dense(m) - q[i]).max()))
    elapsed = time.perf_counter() - started
    ok = (worst_mass <= 1e-9 and min_confidence >= 0.5
          and worst_oracle <= 1e-12 and elapsed < 5.0)
    announce(4, "propagation invariants", ok,
             f"mass drift {worst_mass:.2e} (tol 1e-9), min own-label "
             f"{min_confidence:.3f} (>= 0.5), oracle gap {worst_oracle:.2e} "
             f"(tol 1e-12), {elapsed:.1f}s (< 5s)")


def test_criterion_5_kmeans_sanity():
    """Lloyd inertia never increases; 10-sigma-separated blobs are
    recovered exactly at k = 2 for 20 seeds."""
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        sigma = 1.0
        centers = np.array([[0.0, 0.0], [12.0 * sigma, 0.0]])
        points = np.vstack([
            centers[0] + sigma * rng.normal(size=(40, 2)),
            centers[1] + sigma * rng.normal(size=(40, 2)),
        ])
        labels = np.repeat([0, 1], 40)
        result = softlabel.kmeans(points, 2, seed=seed)
        if not (np.diff(result.inertia_history) <= 1e-9).all():
            failures.append(f"seed {seed}: inertia increased")
        a = result.assignment
        split_clean = ((a[labels == 0] == a[labels == 0][0]).all()
                       and (a[labels == 1] == a[labels == 1][0]).all()
                       and a[0] != a[-1])
        if not split_clean:
            failures.append(f"seed {seed}: blobs not separated")
    # inertia monotonicity on generic data too
    rng = np.random.default_rng(777)
    for k in (2, 5, 9):
        result = softlabel.kmeans(rng.normal(size=(150, 5)), k, seed=k)
        if not (np.diff(result.inertia_history) <= 1e-9).all():
            failures.append(f"k={k}: inertia increased on random data")
    announce(5, "k-means sanity", not failures,
             failures[0] if failures else
             "20/20 blob recoveries, inertia non-increasing on every run")


def test_criterion_6_metric_oracle():
    """Vectorized evaluation equals the naive-sort oracle exactly; the
    hand values for the discount and the cutoff boundary hold."""
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(5, 101))
        params = model.init_params("dot_factorization", m, 8, 4,
                                   seed=int(rng.integers(1 << 30)))
        samples = [Sample(sample_id=i, user_id=int(rng.integers(8)),
                          history=rng.integers(0, m, size=3),
                          y=int(rng.integers(m))) for i in range(20)]
        fast = metrics.evaluate(params, samples, ks=(10, 20))
        slow = metrics.oracle_evaluate(params, samples, ks=(10, 20))
        for k in (10, 20):
            worst = max(worst, abs(fast.recall[k] - slow.recall[k]),
                        abs(fast.ndcg[k] - slow.ndcg[k]))
    hand_ok = (metrics.ndcg_at_k(3, 10) == 0.5
               and metrics.recall_at_k(10, 10) == 1.0
               and metrics.recall_at_k(11, 10) == 0.0)
    ok = worst <= 1e-12 and hand_ok
    announce(6, "metric oracle", ok,
             f"max evaluate/oracle gap {worst:.2e} (tol 1e-12), "
             f"hand values exact: {hand_ok}")


# ---------------------------------------------------------------------------
# end-to-end experiments (criteria 7-9)

SYNTH_DATASET = dict(kind="synth", n_users=500, n_items=200, n_clusters=4,
                     events_per_user=20, noise=0.3, seed=7)

SMALL_DATASET = dict(kind="synth", n_users=120, n_items=40, n_clusters=4,
                     events_per_user=15, noise=0.2, seed=3)


def base_config(dataset, **overrides):
    cfg = dict(dataset=dataset, model_kind="dot_factorization", d=16,
               mode="CE", generator="NONE", pretrain_epochs=0,
               train_epochs=30, patience=5, batch_size=256, seed=1)
    cfg.update(overrides)
    return ExperimentConfig(**cfg)


def lp_config(dataset, clusters, **overrides):
    cfg = dict(dataset=dataset, model_kind="dot_factorization", d=16,
               mode="DECOUPLED", generator="LP", lambda1=0.5, lambda2=0.5,
               k=clusters, tau=1.0, rounds=3, pretrain_epochs=10,
               train_epochs=30, patience=5, batch_size=256, seed=1)
    cfg.update(overrides)
    return ExperimentConfig(**cfg)


def directional_comparison(dataset, clusters, seeds=(1, 2, 3)):
    """Grid-pick (lambda1, lambda2) on one seed, then compare the decoupled
    run against the hard-label base across seeds."""
    grid = {"lambda1": [0.1, 0.5, 0.9], "lambda2": [0.1, 0.5, 0.9]}
    cells = grid_search(lp_config(dataset, clusters, seed=seeds[0]), grid)
    best = cells[0]
    assert best["report"] is not None, best["error"]
    lam1 = best["overrides"]["lambda1"]
    lam2 = best["overrides"]["lambda2"]

    base_scores, lp_scores = [], []
    for seed in seeds:
        base_scores.append(run_experiment(
            base_config(dataset, seed=seed)).test_metrics["N@10"])
        lp_scores.append(run_experiment(
            lp_config(dataset, clusters, lambda1=lam1, lambda2=lam2,
                      seed=seed)).test_metrics["N@10"])
    return float(np.mean(base_scores)), float(np.mean(lp_scores)), (lam1, lam2)


def test_criterion_7_directional_uplift(tmp_path):
    """The decoupled loss with propagated targets must not fall behind the
    hard-label base (tolerance -1% relative) on both dataset shapes."""
    started = time.perf_counter()
    results = {}

    base_mean, lp_mean, best = directional_comparison(SYNTH_DATASET, clusters=4)
    results["planted-cluster"] = (base_mean, lp_mean, best)

    # same check through the 4-column file format (user, item, rating, ts)
    log = synth_generate(n_users=300, n_items=120, n_clusters=6,
                         events_per_user=25, noise=0.3, seed=11)
    path = tmp_path / "u.data"
    write_events(log, path, with_rating=True)
    file_dataset = dict(kind="file", path=str(path), format="tsv",
                        columns=[0, 1, 3])
    base_mean2, lp_mean2, best2 = directional_comparison(file_dataset, clusters=6)
    results["interaction-file"] = (base_mean2, lp_mean2, best2)

    elapsed = time.perf_counter() - started
    details = []
    ok = elapsed < 600.0
    for name, (base_score, lp_score, best_pair) in results.items():
        uplift = (lp_score - base_score) / base_score * 100.0
        ok &= lp_score >= 0.99 * base_score
        details.append(f"{name}: base N@10 {base_score:.5f}, decoupled+LP "
                       f"{lp_score:.5f} at {best_pair} ({uplift:+.1f}%)")
    announce(7, "directional uplift", ok,
             "; ".join(details) + f"; {elapsed:.0f}s (< 600s)")


def test_criterion_8_ablation_arms():
    """Both single-objective arms run to completion on the planted-cluster
    dataset; the non-target-only arm's standing against base is recorded,
    not asserted (at this scale the propagated non-target distribution can
    carry most of the cluster signal)."""
    base = run_experiment(base_config(SYNTH_DATASET, train_epochs=20))
    arms = {}
    for lam2 in (0.0, 1.0):
        cfg = lp_config(SYNTH_DATASET, clusters=4, lambda2=lam2,
                        pretrain_epochs=5, train_epochs=20)
        arms[lam2] = run_experiment(cfg)
    ok = all(r.best_epoch >= 1 and 0.0 <= r.test_metrics["N@10"] <= 1.0
             for r in arms.values())
    nontarget_only = arms[0.0].test_metrics["N@10"]
    target_only = arms[1.0].test_metrics["N@10"]
    base_score = base.test_metrics["N@10"]
    note = ("non-target-only underperforms base as expected"
            if nontarget_only < base_score else
            "non-target-only did NOT underperform base on this draw (recorded)")
    announce(8, "ablation arms", ok,
             f"target-only N@10 {target_only:.5f}, non-target-only "
             f"{nontarget_only:.5f}, base {base_score:.5f}; {note}")


def test_criterion_9_generality_grid():
    """Every generator runs under both loss framings and the comparison
    table materializes all six cells."""
    base = ExperimentConfig(
        dataset=SMALL_DATASET, model_kind="dot_factorization", d=16,
        mode="COUPLED", generator="LS", lambda1=0.5, lambda2=0.5,
        k=4, tau=1.0, rounds=3, pretrain_epochs=3, train_epochs=5,
        batch_size=256, seed=2)
    cells = grid_search(base, {"generator": ["LS", "POP", "LP"],
                               "mode": ["COUPLED", "DECOUPLED"]})
    ok = all(c["report"] is not None for c in cells) and len(cells) == 6
    table = reporting.markdown_table([c["report"] for c in cells
                                      if c["report"] is not None])
    data_rows = [line for line in table.splitlines()[2:] if line.strip()]
    ok &= len(data_rows) == 6
    labels = sorted(c["report"].label for c in cells if c["report"])
    announce(9, "generality grid", ok,
             f"6/6 cells trained; table rows: {len(data_rows)}; "
             f"labels {labels}")
