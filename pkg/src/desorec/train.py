"""End-to-end pipeline: pretrain on hard labels, export representations,
generate soft targets, retrain under the configured objective.

The final model restarts from a fresh (same-seed) initialization by
default; ``warm_start`` continues from the pretrained parameters instead.
Batch order is a seeded permutation per epoch, so runs are bitwise
reproducible on one thread.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import dataio, loss as losses, metrics, model, softlabel
from .errors import ContractViolation, NumericError

GENERATORS = ("NONE", "LS", "POP", "LP")

VALID_METRIC_K = 10  # model selection uses NDCG at this cutoff


@dataclass
class ExperimentConfig:
    """Everything one run needs; mirrors the config-file keys one-to-one."""

    dataset: dict = field(default_factory=lambda: {
        "kind": "synth", "n_users": 200, "n_items": 100, "n_clusters": 4,
        "events_per_user": 10, "noise": 0.2,
    })
    min_count: int = 5
    max_len: int = 20
    model_kind: str = "dot_factorization"
    d: int = 64
    mode: str = "CE"
    lambda1: float = 0.5
    lambda2: float = 0.5
    epsilon: float = 0.1
    generator: str = "NONE"
    k: int = 16
    tau: float = 1.0
    rounds: int = 3
    pretrain_epochs: int = 20
    train_epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    patience: int = 5
    eval_ks: tuple = (10, 20)
    warm_start: bool = False
    cluster_cap: int = softlabel.CLUSTER_CAP
    debug_checks: bool = False

    def __post_init__(self):
        self.eval_ks = tuple(self.eval_ks)
        self.loss_config()  # validates mode and trade-off parameters
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.generator == "NONE" and self.mode != "CE":
            raise ValueError("generator NONE is only valid with mode CE")
        if self.generator == "LP":
            if self.k < 1 or self.tau <= 0.0 or self.rounds < 0:
                raise ValueError("LP requires k >= 1, tau > 0, rounds >= 0")
        if self.model_kind not in model.KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(mode=self.mode, lambda1=self.lambda1,
                                 lambda2=self.lambda2, epsilon=self.epsilon)

    def label(self) -> str:
        if self.generator == "NONE":
            return self.mode
        return f"{self.mode}+{self.generator}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eval_ks"] = list(self.eval_ks)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class Dataset:
    """Prepared splits plus the id-space sizes they are indexed against."""

    splits: dataio.SplitSet
    user_count: int
    item_count: int
    stats: dict = field(default_factory=dict)


@dataclass
class RunReport:
    config: dict
    label: str
    seed: int
    epochs: list[dict]
    test_metrics: dict
    best_epoch: int
    best_valid_ndcg: float
    first_batch_loss: float
    wall_clock_s: float
    provenance: dict = field(default_factory=dict)

    def summary_line(self) -> str:
        t = self.test_metrics
        return ",".join([
            self.label, str(self.seed),
            f"{t['R@20']:.6f}", f"{t['N@20']:.6f}",
            f"{t['R@10']:.6f}", f"{t['N@10']:.6f}",
        ])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def render_text(self) -> str:
        """Key-value block plus a per-epoch table."""
        lines = [f"label = {self.label}", f"seed = {self.seed}",
                 f"best_epoch = {self.best_epoch}",
                 f"best_valid_ndcg@10 = {self.best_valid_ndcg:.6f}",
                 f"wall_clock_s = {self.wall_clock_s:.2f}"]
        for key, value in sorted(self.provenance.items()):
            lines.append(f"provenance.{key} = {value}")
        lines.append("")
        lines.append("epoch\ttrain_loss\tvalid_R@10\tvalid_N@10")
        for row in self.epochs:
            lines.append("{epoch}\t{train_loss:.6f}\t{valid_recall:.6f}"
                         "\t{valid_ndcg:.6f}".format(**row))
        lines.append("")
        lines.append("test\t" + ",".join(sorted(self.test_metrics)))
        lines.append("summary," + self.summary_line())
        return "\n".join(lines) + "\n"


def metrics_to_dict(m: metrics.Metrics) -> dict:
    out = {}
    for k in sorted(m.recall, reverse=True):
        out[f"R@{k}"] = m.recall[k]
        out[f"N@{k}"] = m.ndcg[k]
    out["n"] = m.n_evaluated
    return out


# ---------------------------------------------------------------------------
# data loading


def load_dataset(config: ExperimentConfig) -> Dataset:
    source = dict(config.dataset)
    kind = source.pop("kind", None)
    if kind == "dir":
        splits, user_count, item_count = dataio.load_splits(source["path"])
        return Dataset(splits=splits, user_count=user_count,
                       item_count=item_count)
    if kind == "synth":
        # the data seed is independent of config.seed so that multi-seed
        # experiments vary the model, not the dataset
        log = dataio.synth_generate(seed=source.pop("seed", 0), **source)
    elif kind == "file":
        log = dataio.load_interactions(
            source["path"], format=source.get("format", "tsv"),
            columns=tuple(source.get("columns", (0, 1, 2))))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return prepare_dataset(log, config.min_count, config.max_len)


def prepare_dataset(log: dataio.InteractionLog, min_count: int = 5,
                    max_len: int = 20) -> Dataset:
    prefilter = len(log)
    filtered = dataio.filter_min_count(log, min_count)
    samples = dataio.build_samples(filtered, max_len)
    splits = dataio.split_leave_one_out(samples)
    stats = {
        "users": filtered.user_count,
        "items": filtered.item_count,
        "actions": len(filtered),
        "actions_per_user": len(filtered) / filtered.user_count,
        "actions_per_item": len(filtered) / filtered.item_count,
        "prefilter_actions": prefilter,
    }
    return Dataset(splits=splits, user_count=filtered.user_count,
                   item_count=filtered.item_count, stats=stats)


# ---------------------------------------------------------------------------
# batched objective


def _dense_targets(target_rows: list[losses.SoftTarget], m: int) -> np.ndarray:
    q = np.zeros((len(target_rows), m))
    for row, t in enumerate(target_rows):
        q[row, t.items] += t.probs
        if t.uniform_mass > 0.0:
            q[row] += t.uniform_mass / m
    return q


def batch_loss_and_grad(probs: np.ndarray, log_probs: np.ndarray,
                        ys: np.ndarray, target_rows, cfg: losses.LossConfig):
    """Vectorized mean loss and mean grad w.r.t. logits for one batch.

    Matches the per-sample operations in ``loss`` exactly; tested against
    them row by row.
    """
    n, m = probs.shape
    rows = np.arange(n)
    eps = cfg.eps_log
    log_p = np.maximum(log_probs, np.log(eps))

    if cfg.mode == "CE":
        per_sample = -log_p[rows, ys]
        grad = probs.copy()
        grad[rows, ys] -= 1.0
        return float(per_sample.mean()), grad / n

    q = _dense_targets(target_rows, m)

    if cfg.mode == "LS":
        per_sample = -(q * log_p).sum(axis=1)
        return float(per_sample.mean()), (probs - q) / n

    if cfg.mode == "COUPLED":
        with np.errstate(divide="ignore", invalid="ignore"):
            contrib = np.where(q > 0.0, q * (np.log(np.maximum(q, eps)) - log_p), 0.0)
        kl = contrib.sum(axis=1)
        per_sample = cfg.lambda1 * kl + (1.0 - cfg.lambda1) * (-log_p[rows, ys])
        grad = probs - cfg.lambda1 * q
        grad[rows, ys] -= 1.0 - cfg.lambda1
        return float(per_sample.mean()), grad / n

    # DECOUPLED
    q_y = q[rows, ys]
    a = cfg.lambda1 * q_y + 1.0 - cfg.lambda1
    p_y = np.clip(probs[rows, ys], eps, 1.0 - eps)
    one_minus_py = 1.0 - p_y

    kl_target = a * (np.log(a) - np.log(p_y))
    rest = 1.0 - a
    has_rest = rest > 0.0
    kl_target[has_rest] += rest[has_rest] * (
        np.log(rest[has_rest]) - np.log(one_minus_py[has_rest]))

    degenerate = q_y >= 1.0
    q_hat = q.copy()
    q_hat[rows, ys] = 0.0
    denom = np.where(degenerate, 1.0, 1.0 - q_y)
    q_hat /= denom[:, None]
    p_hat = probs / one_minus_py[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(
            q_hat > 0.0,
            q_hat * (np.log(np.maximum(q_hat, eps)) - np.log(np.maximum(p_hat, eps))),
            0.0)
    contrib[rows, ys] = 0.0
    kl_nontarget = np.where(degenerate, 0.0, contrib.sum(axis=1))
    per_sample = cfg.lambda2 * kl_target + (1.0 - cfg.lambda2) * kl_nontarget

    coef = a - (1.0 - a) * p_y / one_minus_py
    g_target = probs * coef[:, None]
    g_target[rows, ys] = probs[rows, ys] - a
    g_nontarget = p_hat - q_hat
    g_nontarget[rows, ys] = 0.0
    g_nontarget[degenerate] = 0.0
    grad = cfg.lambda2 * g_target + (1.0 - cfg.lambda2) * g_nontarget
    return float(per_sample.mean()), grad / n


def _debug_batch_checks(probs, log_probs, ys, target_rows, cfg,
                        batch_loss: float) -> None:
    """Spot-check the vectorized path against the per-sample operations."""
    take = min(4, len(ys))
    for row in range(take):
        q = target_rows[row] if target_rows is not None else None
        ref, _ = losses.compute_loss(probs[row], q, int(ys[row]), cfg)
        single, _ = batch_loss_and_grad(
            probs[row:row + 1], log_probs[row:row + 1], ys[row:row + 1],
            None if target_rows is None else target_rows[row:row + 1], cfg)
        if abs(single - ref) > 1e-8 * max(1.0, abs(ref)):
            raise AssertionError(
                f"batch loss {single} disagrees with per-sample loss {ref}")
    if cfg.mode == "DECOUPLED" and cfg.lambda2 == 1.0:
        ref = np.mean([
            losses.decompose(probs[i], target_rows[i], int(ys[i]),
                             cfg.lambda1).kl_target
            for i in range(len(ys))])
        if abs(batch_loss - ref) > 1e-8 * max(1.0, abs(ref)):
            raise AssertionError("lambda2=1 batch loss is not the mean "
                                 "target-confidence KL")
    if cfg.mode == "COUPLED" and cfg.lambda1 == 0.0:
        ce, _ = batch_loss_and_grad(probs, log_probs, ys, None,
                                    losses.LossConfig(mode="CE"))
        if abs(batch_loss - ce) > 1e-8 * max(1.0, abs(ce)):
            raise AssertionError("lambda1=0 coupled loss is not the "
                                 "hard-label cross-entropy")


# ---------------------------------------------------------------------------
# training loops


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _train_loop(params: model.ModelParams, data: Dataset,
                targets: softlabel.SoftTargetSet | None,
                cfg: ExperimentConfig, loss_cfg: losses.LossConfig,
                epochs: int, patience: int | None):
    """Mini-batch Adam training; returns
    (best_params, history, best_epoch, best_valid, first_batch_loss)."""
    train = data.splits.train
    valid = data.splits.valid
    state = model.init_adam(params)

    target_rows = None
    if loss_cfg.mode != "CE":
        if targets is None:
            raise ContractViolation(f"mode {loss_cfg.mode} requires soft targets")
        missing = [s.sample_id for s in train if s.sample_id not in targets.targets]
        if missing:
            raise ContractViolation(
                f"{len(missing)} train samples lack a soft target "
                f"(first: {missing[0]})")
        target_rows = [targets.targets[s.sample_id] for s in train]

    best_params = params.copy()
    best_valid = -np.inf
    best_epoch = 0
    bad_epochs = 0
    history: list[dict] = []
    first_batch_loss = float("nan")

    for epoch in range(1, epochs + 1):
        order = _epoch_rng(cfg.seed, epoch).permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_samples = [train[i] for i in idx]
            batch = model.BatchInputs.from_samples(batch_samples)
            reps = model.forward_batch(params, batch)
            probs, log_probs = model.score_batch(params, reps)
            rows = None if target_rows is None else [target_rows[i] for i in idx]
            loss_value, grad_logits = batch_loss_and_grad(
                probs, log_probs, batch.targets, rows, loss_cfg)
            if cfg.debug_checks:
                _debug_batch_checks(probs, log_probs, batch.targets, rows,
                                    loss_cfg, loss_value)
            if not np.isfinite(loss_value):
                grads = model.backward_batch(params, batch, reps, grad_logits)
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                    f" (max |grad| = {grads.max_abs():.3e})")
            if epoch == 1 and start == 0:
                first_batch_loss = loss_value
            grads = model.backward_batch(params, batch, reps, grad_logits)
            model.adam_step(params, state, grads, cfg.lr)
            epoch_loss += loss_value * len(idx)

        row = {"epoch": epoch,
               "train_loss": epoch_loss / max(len(train), 1),
               "valid_recall": 0.0, "valid_ndcg": 0.0}
        if valid:
            valid_metrics = metrics.evaluate(params, valid, ks=cfg.eval_ks)
            row["valid_recall"] = valid_metrics.recall[VALID_METRIC_K]
            row["valid_ndcg"] = valid_metrics.ndcg[VALID_METRIC_K]
        history.append(row)

        if row["valid_ndcg"] > best_valid:
            best_valid = row["valid_ndcg"]
            best_params = params.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if patience is not None and bad_epochs >= patience:
                break

    if best_epoch == 0:  # no epochs ran (or no valid data ever scored)
        best_params = params.copy()
        best_valid = 0.0
    return best_params, history, best_epoch, float(best_valid), first_batch_loss


def pretrain(config: ExperimentConfig, data: Dataset) -> model.ModelParams:
    """Hard-label warmup; returns the checkpoint with the best valid NDCG."""
    params = model.init_params(config.model_kind, data.item_count,
                               data.user_count, config.d, config.seed)
    if config.pretrain_epochs == 0:
        return params
    ce = losses.LossConfig(mode="CE")
    best, _, _, _, _ = _train_loop(params, data, None, config, ce,
                                   config.pretrain_epochs, patience=None)
    return best


def build_soft_targets(config: ExperimentConfig,
                       pretrained: model.ModelParams | None,
                       train_samples,
                       num_items: int | None = None) -> softlabel.SoftTargetSet:
    """Dispatch on the configured generator."""
    if num_items is None:
        if pretrained is None:
            raise ContractViolation("need num_items or pretrained parameters")
        num_items = pretrained.num_items
    if config.generator == "NONE":
        return softlabel.generate_onehot(train_samples, num_items)
    if config.generator == "LS":
        return softlabel.generate_ls(train_samples, config.epsilon, num_items)
    if config.generator == "POP":
        return softlabel.generate_pop(train_samples, num_items=num_items)
    if pretrained is None:
        raise ContractViolation("label propagation needs pretrained parameters")
    embeddings = model.embed_samples(pretrained, train_samples)
    return softlabel.generate_lp(embeddings, train_samples, config.k,
                                 config.tau, config.rounds, seed=config.seed,
                                 cluster_cap=config.cluster_cap,
                                 num_items=num_items)


def train_final(config: ExperimentConfig, data: Dataset,
                targets: softlabel.SoftTargetSet,
                pretrained: model.ModelParams | None = None):
    """Train under the configured objective; returns (params, RunReport)."""
    started = time.perf_counter()
    if config.warm_start:
        if pretrained is None:
            raise ContractViolation("warm_start requires pretrained parameters")
        params = pretrained.copy()
    else:
        params = model.init_params(config.model_kind, data.item_count,
                                   data.user_count, config.d, config.seed)
    best, history, best_epoch, best_valid, first_loss = _train_loop(
        params, data, targets, config, config.loss_config(),
        config.train_epochs, patience=config.patience)

    test_metrics = metrics.evaluate(best, data.splits.test, ks=config.eval_ks)
    provenance = {"generator": targets.generator,
                  "mean_target_confidence": targets.mean_target_confidence()}
    provenance.update(targets.params)
    report = RunReport(
        config=config.to_dict(), label=config.label(), seed=config.seed,
        epochs=history, test_metrics=metrics_to_dict(test_metrics),
        best_epoch=best_epoch, best_valid_ndcg=best_valid,
        first_batch_loss=first_loss,
        wall_clock_s=time.perf_counter() - started,
        provenance=provenance,
    )
    return best, report


def run_experiment(config: ExperimentConfig, return_params: bool = False):
    """Load data, pretrain, generate targets, retrain, evaluate."""
    started = time.perf_counter()
    data = load_dataset(config)
    pretrained = None
    if config.generator == "LP" or config.warm_start:
        pretrained = pretrain(config, data)
    targets = build_soft_targets(config, pretrained, data.splits.train,
                                 num_items=data.item_count)
    params, report = train_final(config, data, targets, pretrained)
    report.wall_clock_s = time.perf_counter() - started
    report.provenance["data_stats"] = data.stats
    if return_params:
        return report, params
    return report


def _run_cell(base_config: ExperimentConfig, overrides: dict) -> dict:
    cell = {"overrides": overrides, "report": None, "error": None,
            "valid_ndcg": None}
    try:
        config = replace(base_config, **overrides)
        report = run_experiment(config)
        cell["report"] = report
        cell["valid_ndcg"] = report.best_valid_ndcg
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        cell["error"] = f"{type(exc).__name__}: {exc}"
    return cell


def grid_search(base_config: ExperimentConfig, grid: dict[str, list],
                jobs: int = 1) -> list[dict]:
    """Cartesian sweep over config fields; one failed cell never kills the
    sweep.  Cells are returned sorted by best valid NDCG, best first."""
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(grid) - known
    if unknown:
        raise ValueError(f"grid keys are not config fields: {sorted(unknown)}")

    keys = sorted(grid)
    all_overrides = [dict(zip(keys, values))
                     for values in itertools.product(*(grid[key] for key in keys))]
    if jobs > 1 and len(all_overrides) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, itertools.repeat(base_config),
                                  all_overrides))
    else:
        cells = [_run_cell(base_config, overrides)
                 for overrides in all_overrides]
    cells.sort(key=lambda c: (c["valid_ndcg"] is None,
                              -(c["valid_ndcg"] or 0.0)))
    return cells
