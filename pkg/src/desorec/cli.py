"""Command-line entry point.

Subcommands cover the whole pipeline (prepare / synth / pretrain /
gen-targets / train / evaluate), the identity verifiers (verify), the
trade-off sweep (sweep), and cross-run comparison tables plus figures
(report).  Exit codes: 0 success, 1 verification or assertion failure,
2 usage and I/O errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, loss as losses, metrics, model, report as reporting
from . import softlabel, train as training
from .errors import ContractViolation, EmptyDatasetError, NumericError, ParseError

DATA_DIR_ENV = "DESOREC_DATA_DIR"

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_USAGE = 2


def _write_manifest(out_dir: Path, artifacts: list[str]) -> None:
    with open(out_dir / "manifest.txt", "w", encoding="utf-8") as fh:
        for name in artifacts:
            fh.write(name + "\n")


def _resolve_data_dir(value: str | None) -> Path:
    if value is None:
        value = os.environ.get(DATA_DIR_ENV)
    if value is None:
        raise FileNotFoundError(
            f"no data directory given (use --data or ${DATA_DIR_ENV})")
    return Path(value)


def _stats_block(stats: dict) -> str:
    lines = ["#Users\t#Items\t#Actions\t#Actions/User\t#Actions/Item",
             "{users}\t{items}\t{actions}\t{actions_per_user:.2f}"
             "\t{actions_per_item:.2f}".format(**stats),
             f"pre-filter actions\t{stats['prefilter_actions']}"]
    return "\n".join(lines) + "\n"


def _config_from_args(args) -> training.ExperimentConfig:
    """Config file first, explicit flags win."""
    base = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    overrides = {
        name: getattr(args, name)
        for name in ("model_kind", "d", "mode", "lambda1", "lambda2", "epsilon",
                     "generator", "k", "tau", "rounds", "pretrain_epochs",
                     "train_epochs", "batch_size", "lr", "seed", "patience",
                     "min_count", "max_len", "warm_start", "debug_checks",
                     "cluster_cap")
        if getattr(args, name, None) is not None
    }
    if getattr(args, "eval_ks", None) is not None:
        overrides["eval_ks"] = tuple(int(k) for k in args.eval_ks.split(","))
    base.update(overrides)
    if getattr(args, "data", None) or base.get("dataset") is None:
        base["dataset"] = {"kind": "dir", "path": str(_resolve_data_dir(
            getattr(args, "data", None)))}
    return training.ExperimentConfig.from_dict(base)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = tuple(int(c) for c in args.columns.split(","))
    log = dataio.load_interactions(args.input, format=args.format,
                                   columns=columns)
    data = training.prepare_dataset(log, args.min_count, args.max_len)
    filtered = dataio.filter_min_count(log, args.min_count)
    artifacts = dataio.save_splits(data.splits, filtered, out)
    with open(out / "stats.txt", "w", encoding="utf-8") as fh:
        fh.write(_stats_block(data.stats))
    artifacts.append("stats.txt")
    _write_manifest(out, artifacts)
    print(_stats_block(data.stats), end="")
    print(f"splits written to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = dataio.synth_generate(args.users, args.items, args.clusters,
                                args.events_per_user, args.noise, args.seed)
    path = out / "events.tsv"
    dataio.write_events(log, path, format="tsv", with_rating=args.with_rating)
    _write_manifest(out, ["events.tsv"])
    print(f"{len(log)} events written to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _config_from_args(args)
    data = training.load_dataset(config)
    started = time.perf_counter()
    params = training.pretrain(config, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(params, out / "pretrained.npz")
    meta = {"wall_clock_s": time.perf_counter() - started,
            "config": config.to_dict(), "data_stats": data.stats}
    with open(out / "pretrain.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    _write_manifest(out, ["pretrained.npz", "pretrain.json"])
    print(f"pretrained checkpoint written to {out / 'pretrained.npz'}")
    return EXIT_OK


def cmd_gen_targets(args) -> int:
    config = _config_from_args(args)
    data = training.load_dataset(config)
    pretrained = model.load_checkpoint(args.checkpoint) if args.checkpoint else None
    targets = training.build_soft_targets(config, pretrained,
                                          data.splits.train,
                                          num_items=data.item_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    softlabel.save_targets(targets, out / "targets.tsv")
    _write_manifest(out, ["targets.tsv"])
    print(f"{len(targets)} soft targets ({targets.generator}) written to "
          f"{out / 'targets.tsv'}")
    return EXIT_OK


def _write_run(out: Path, params, report: training.RunReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(params, out / "model.npz")
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(report.render_text())
    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(reporting.METRIC_COLUMNS) + "\n")
        fh.write(",".join(f"{report.test_metrics[c]:.6f}"
                          for c in reporting.METRIC_COLUMNS) + "\n")
    _write_manifest(out, ["model.npz", "report.json", "report.txt",
                          "metrics.csv"])


def cmd_train(args) -> int:
    config = _config_from_args(args)
    data = training.load_dataset(config)
    pretrained = None
    if args.checkpoint:
        pretrained = model.load_checkpoint(args.checkpoint)
    elif config.generator == "LP" or config.warm_start:
        pretrained = training.pretrain(config, data)
    if args.targets:
        targets = softlabel.load_targets(args.targets)
    else:
        targets = training.build_soft_targets(config, pretrained,
                                              data.splits.train,
                                              num_items=data.item_count)
    params, report = training.train_final(config, data, targets, pretrained)
    report.provenance["data_stats"] = data.stats
    _write_run(Path(args.out), params, report)
    print(report.render_text(), end="")
    print(f"run artifacts written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data_dir = _resolve_data_dir(args.data)
    splits, _, _ = dataio.load_splits(data_dir)
    params = model.load_checkpoint(args.checkpoint)
    split = getattr(splits, args.split)
    ks = tuple(int(k) for k in args.ks.split(","))
    result = metrics.evaluate(params, split, ks=ks)
    print(result.csv_header())
    print(result.csv_line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
            fh.write(result.csv_header() + "\n" + result.csv_line() + "\n")
        _write_manifest(out, ["metrics.csv"])
    return EXIT_OK


def _parse_grid(text: str) -> dict[str, list]:
    """Parse 'lambda1=0.1,0.3;lambda2=0.5,0.9' into a value grid."""
    grid: dict[str, list] = {}
    if not text:
        return grid
    for part in text.split(";"):
        if not part:
            continue
        key, _, values = part.partition("=")
        if not values:
            raise ValueError(f"grid entry {part!r} is not key=v1,v2,...")
        parsed = []
        for v in values.split(","):
            try:
                parsed.append(json.loads(v))
            except json.JSONDecodeError:
                parsed.append(v)
        grid[key.strip()] = parsed
    return grid


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    grid = _parse_grid(args.grid)
    cells = training.grid_search(config, grid, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid) if grid else []
    reporting.write_sweep_csv(cells, keys, out / "sweep.csv")
    artifacts = ["sweep.csv"]
    if reporting.plot_sweep_heatmap(cells, out / "sweep_heatmap.png"):
        artifacts.append("sweep_heatmap.png")
    _write_manifest(out, artifacts)

    failed = sum(1 for c in cells if c["error"] is not None)
    best = cells[0]
    print(f"{len(cells)} cells ({failed} failed) -> {out / 'sweep.csv'}")
    if best["report"] is not None:
        print(f"best by valid NDCG@10: {best['overrides']} "
              f"-> {best['valid_ndcg']:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    """Random-instance checks of the loss identities and model gradients."""
    rng = np.random.default_rng(args.seed)
    draws = args.draws

    max_fq = 0.0
    max_grad = 0.0
    max_redline = 0.0
    for _ in range(draws):
        m = int(rng.integers(3, 11))
        y = int(rng.integers(m))
        lambda1 = float(rng.uniform(0.0, 1.0))
        q = _random_soft_target(rng, m, y)
        p1 = _random_probs(rng, m)
        p2 = _random_probs(rng, m)
        parts1 = losses.decompose(p1, q, y, lambda1)
        parts2 = losses.decompose(p2, q, y, lambda1)
        max_fq = max(max_fq, abs(parts1.label_constant - parts2.label_constant))
        ok, residual = losses.verify_decomposition(p1, q, y, lambda1,
                                                   tol=args.tol)
        max_grad = max(max_grad, residual)
        max_redline = max(max_redline, losses.redline_residual(p1, q, y, lambda1))

    grad_check = _model_gradient_residual(args.seed)

    checks = [
        ("label-constant invariance", max_fq, 1e-9),
        ("decomposition gradient identity", max_grad, args.tol),
        ("coupled-equivalence rescaling", max_redline, 1e-8),
        ("model gradient vs finite differences", grad_check, 1e-4),
    ]
    failed = False
    for name, residual, tol in checks:
        status = "PASS" if residual <= tol else "FAIL"
        failed |= residual > tol
        print(f"{status}  {name}: max residual {residual:.3e} (tol {tol:g})")
    return EXIT_VERIFY_FAIL if failed else EXIT_OK


def _random_probs(rng, m: int) -> np.ndarray:
    z = rng.normal(size=m)
    e = np.exp(z - z.max())
    return e / e.sum()


def _random_soft_target(rng, m: int, y: int) -> losses.SoftTarget:
    size = int(rng.integers(2, m + 1))
    support = rng.choice(m, size=size, replace=False)
    if y not in support:
        support[0] = y
    probs = rng.uniform(0.05, 1.0, size=size)
    probs /= probs.sum()
    return losses.SoftTarget(items=np.sort(support),
                             probs=probs[np.argsort(support)], y=y, num_items=m)


def _model_gradient_residual(seed: int) -> float:
    """Worst relative gap between analytic and finite-difference gradients
    across model kinds and loss modes on a tiny instance."""
    from .dataio import Sample

    rng = np.random.default_rng(seed)
    m, users, d = 6, 3, 4
    worst = 0.0
    for kind in model.KINDS:
        params = model.init_params(kind, m, users, d, seed)
        sample = Sample(sample_id=0, user_id=1,
                        history=np.array([0, 2, 4]), y=3)
        q = _random_soft_target(rng, m, sample.y)
        for mode in losses.LOSS_MODES:
            cfg = losses.LossConfig(mode=mode, lambda1=0.6, lambda2=0.4)

            def scalar_loss(ps):
                rep = model.forward(ps, sample)
                dist = model.score_and_softmax(ps, rep)
                return losses.compute_loss(dist.probs, q, sample.y, cfg)[0]

            dist = model.score_and_softmax(params, model.forward(params, sample))
            _, grad_logits = losses.compute_loss(dist.probs, q, sample.y, cfg)
            grads = model.backward(params, sample, grad_logits)
            worst = max(worst, _fd_param_residual(params, grads, scalar_loss))
    return worst


def _fd_param_residual(params, grads, scalar_loss, h: float = 1e-5) -> float:
    arrays = params.arrays()
    analytic = {name: np.zeros_like(arr) for name, arr in arrays.items()}
    analytic["item_out"][:] = grads.item_out
    if grads.user_rows is not None:
        ids, g = grads.user_rows
        analytic["user_emb"][ids] = g
    if grads.item_in_rows is not None:
        ids, g = grads.item_in_rows
        analytic["item_in"][ids] = g
    if grads.proj is not None:
        analytic["proj"][:] = grads.proj
        analytic["bias"][:] = grads.bias

    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = scalar_loss(params)
            flat[j] = orig - h
            down = scalar_loss(params)
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            ref = analytic[name].ravel()[j]
            worst = max(worst, abs(fd - ref) / max(abs(fd), abs(ref), 1e-3))
    return worst


def cmd_report(args) -> int:
    reports = []
    for run in args.runs:
        path = Path(run)
        if path.is_dir():
            path = path / "report.json"
        if not path.exists():
            print(f"warning: no report at {path}, skipping", file=sys.stderr)
            continue
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(training.RunReport.from_json(fh.read()))
    if not reports:
        raise FileNotFoundError("no readable run reports given")

    table = reporting.markdown_table(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.md", "w", encoding="utf-8") as fh:
        fh.write(table)
    reporting.plot_metric_bars(reports, out / "comparison.png")
    _write_manifest(out, ["comparison.md", "comparison.png"])
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(sub) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--data", help=f"prepared data directory "
                                    f"(default ${DATA_DIR_ENV})")
    sub.add_argument("--model-kind", dest="model_kind", choices=model.KINDS)
    sub.add_argument("--d", type=int)
    sub.add_argument("--mode", choices=losses.LOSS_MODES)
    sub.add_argument("--lambda1", type=float)
    sub.add_argument("--lambda2", type=float)
    sub.add_argument("--epsilon", type=float)
    sub.add_argument("--generator", choices=training.GENERATORS)
    sub.add_argument("--k", type=int)
    sub.add_argument("--tau", type=float)
    sub.add_argument("--rounds", type=int)
    sub.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    sub.add_argument("--train-epochs", dest="train_epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--patience", type=int)
    sub.add_argument("--min-count", dest="min_count", type=int)
    sub.add_argument("--max-len", dest="max_len", type=int)
    sub.add_argument("--eval-ks", dest="eval_ks",
                     help="comma-separated metric cutoffs (default 10,20)")
    sub.add_argument("--cluster-cap", dest="cluster_cap", type=int)
    sub.add_argument("--warm-start", dest="warm_start", action="store_const",
                     const=True, default=None)
    sub.add_argument("--debug-checks", dest="debug_checks",
                     action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desorec",
        description="Soft-target training for implicit-feedback recommenders")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("prepare", help="ingest, filter, window, split")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--columns", default="0,1,2",
                   help="indices of user,item,timestamp fields")
    p.add_argument("--min-count", dest="min_count", type=int, default=5)
    p.add_argument("--max-len", dest="max_len", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = commands.add_parser("synth", help="generate a planted-cluster log")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--events-per-user", dest="events_per_user", type=int,
                   required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-rating", dest="with_rating", action="store_true",
                   help="emit a constant rating column (4-column format)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("pretrain", help="hard-label warmup training")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = commands.add_parser("gen-targets", help="build soft targets")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="pretrained model (needed for LP)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_targets)

    p = commands.add_parser("train", help="train under the configured loss")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="pretrained model to reuse")
    p.add_argument("--targets", help="soft-target file to reuse")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("evaluate", help="full-catalog ranking metrics")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"),
                   default="test")
    p.add_argument("--ks", default="10,20")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("sweep", help="grid search over config fields")
    _add_config_flags(p)
    p.add_argument("--grid", required=True,
                   help="e.g. 'lambda1=0.1,0.5,0.9;lambda2=0.1,0.5,0.9'")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = commands.add_parser("verify", help="check the loss identities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_verify)

    p = commands.add_parser("report", help="aggregate run reports")
    p.add_argument("runs", nargs="+", help="run directories or report.json files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ParseError, EmptyDatasetError,
            ContractViolation, NumericError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
