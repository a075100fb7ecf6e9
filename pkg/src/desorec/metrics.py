"""Full-catalog ranking metrics under single held-out targets.

Every item competes; ties are broken by item id ascending so results never
depend on sort stability or seeds.  ``oracle_evaluate`` recomputes the same
numbers by materializing the fully sorted score list per sample and exists
only to cross-check ``evaluate``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .errors import ContractViolation

DEFAULT_KS = (10, 20)


@dataclass
class Metrics:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated: int

    def csv_header(self) -> str:
        ks = sorted(self.recall, reverse=True)
        return ",".join(f"{name}@{k}" for k in ks for name in ("R", "N"))

    def csv_line(self) -> str:
        ks = sorted(self.recall, reverse=True)
        vals = []
        for k in ks:
            vals.extend([self.recall[k], self.ndcg[k]])
        return ",".join(f"{v:.6f}" for v in vals)


def _rank_from_scores(scores: np.ndarray, y: int) -> int:
    """1-based rank of y; equal scores at a lower item id count as above."""
    above = int(np.sum(scores > scores[y]))
    tied_below_id = int(np.sum((scores == scores[y]) & (np.arange(len(scores)) < y)))
    return 1 + above + tied_below_id


def rank_of_target(params: model.ModelParams, sample,
                   exclude_history: bool = False) -> int:
    rep = model.forward(params, sample)
    scores = params.item_out @ rep
    if exclude_history:
        keep = scores[sample.y]
        scores[np.asarray(sample.history, dtype=np.int64)] = -np.inf
        scores[sample.y] = keep
    return _rank_from_scores(scores, sample.y)


def recall_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """1/log2(rank+1) inside the cutoff; the single relevant item makes the
    ideal DCG equal 1."""
    if rank > k:
        return 0.0
    return 1.0 / np.log2(rank + 1.0)


def _batch_ranks(params: model.ModelParams, samples,
                 exclude_history: bool = False) -> np.ndarray:
    batch = model.BatchInputs.from_samples(samples)
    reps = model.forward_batch(params, batch)
    scores = reps @ params.item_out.T
    if exclude_history:
        target_scores_keep = scores[np.arange(len(samples)), batch.targets]
        scores[batch.row_index, batch.hist_flat] = -np.inf
        scores[np.arange(len(samples)), batch.targets] = target_scores_keep
    target_scores = scores[np.arange(len(samples)), batch.targets][:, None]
    above = (scores > target_scores).sum(axis=1)
    ids = np.arange(scores.shape[1])[None, :]
    tied = ((scores == target_scores) & (ids < batch.targets[:, None])).sum(axis=1)
    return 1 + above + tied


def evaluate(params: model.ModelParams, split, ks=DEFAULT_KS,
             exclude_history: bool = False, batch_size: int = 1024) -> Metrics:
    """Mean per-sample Recall@k and NDCG@k over the split."""
    if not split:
        raise ContractViolation("cannot evaluate an empty split")
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    for start in range(0, len(split), batch_size):
        ranks = _batch_ranks(params, split[start:start + batch_size],
                             exclude_history)
        for k in ks:
            inside = ranks <= k
            recall[k] += float(inside.sum())
            ndcg[k] += float((1.0 / np.log2(ranks[inside] + 1.0)).sum())
    n = len(split)
    return Metrics(recall={k: v / n for k, v in recall.items()},
                   ndcg={k: v / n for k, v in ndcg.items()},
                   n_evaluated=n)


def oracle_evaluate(params: model.ModelParams, split, ks=DEFAULT_KS,
                    exclude_history: bool = False) -> Metrics:
    """Naive-sort reimplementation of ``evaluate`` for equivalence tests."""
    if not split:
        raise ContractViolation("cannot evaluate an empty split")
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    for sample in split:
        rep = model.forward(params, sample)
        scores = params.item_out @ rep
        if exclude_history:
            keep = scores[sample.y]
            scores = scores.copy()
            scores[np.asarray(sample.history, dtype=np.int64)] = -np.inf
            scores[sample.y] = keep
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        rank = order.index(sample.y) + 1
        for k in ks:
            recall[k] += recall_at_k(rank, k)
            ndcg[k] += ndcg_at_k(rank, k)
    n = len(split)
    return Metrics(recall={k: v / n for k, v in recall.items()},
                   ndcg={k: v / n for k, v in ndcg.items()},
                   n_evaluated=n)
