"""Soft-target generators: label propagation over K-means neighbors, plus
the label-smoothing and popularity-prior alternatives.

Label propagation treats every pair of samples inside a K-means cluster as
neighbors.  Propagation weights are a temperature softmax over negative
euclidean distance (self-edge included, so singleton clusters are
well-defined), and targets evolve as

    q(t+1) = 0.5 * W q(t) + 0.5 * q(0)

which pins at least half the mass on each sample's own label at every step.
Targets stay sparse: a cluster's distributions live on the set of labels
occurring in that cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .loss import SoftTarget, make_uniform_smoothing, onehot_target

DEFAULT_TAU = 1.0
DEFAULT_ROUNDS = 3
CLUSTER_CAP = 2048

TARGET_FILE_VERSION = 1


@dataclass
class ClusterAssignment:
    assignment: np.ndarray      # n -> cluster id
    centroids: np.ndarray       # k x d
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class PropagationWeights:
    """Row-stochastic neighbor weights for one cluster."""

    w: np.ndarray
    tau: float


@dataclass
class SoftTargetSet:
    targets: dict[int, SoftTarget]
    generator: str              # LS | POP | LP | NONE
    params: dict = field(default_factory=dict)
    num_items: int = 0

    def __len__(self) -> int:
        return len(self.targets)

    def mean_target_confidence(self) -> float:
        if not self.targets:
            return 1.0
        return float(np.mean([t.q_y for t in self.targets.values()]))


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        (points * points).sum(axis=1)[:, None]
        + (centers * centers).sum(axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d2, 0.0)


def kmeans(embeddings: np.ndarray, k: int, max_iters: int = 100,
           seed: int = 0) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeds until the assignment stops
    changing; empty clusters are reseeded to the farthest point."""
    n = len(embeddings)
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    X = np.asarray(embeddings, dtype=np.float64)

    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centroids[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[c] = X[rng.integers(n)]
        else:
            centroids[c] = X[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_dists(X, centroids[c:c + 1]).ravel())

    assignment = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _sq_dists(X, centroids)
        new_assignment = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_assignment]
        history.append(float(point_d2.sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

        counts = np.bincount(assignment, minlength=k)
        for c in range(k):
            if counts[c] > 0:
                centroids[c] = X[assignment == c].mean(axis=0)
        empties = np.flatnonzero(counts == 0)
        if len(empties):
            order = np.argsort(point_d2)[::-1]
            for c, idx in zip(empties, order):
                centroids[c] = X[idx]

    return ClusterAssignment(assignment=assignment, centroids=centroids,
                             inertia=history[-1], inertia_history=history)


def similarity(e_u: np.ndarray, e_v: np.ndarray) -> float:
    """Negative euclidean distance."""
    return float(-np.linalg.norm(np.asarray(e_u) - np.asarray(e_v)))


def propagation_weights(cluster_embeddings: np.ndarray,
                        tau: float = DEFAULT_TAU) -> PropagationWeights:
    """Row softmax of pairwise similarity / tau over the whole cluster."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    X = np.asarray(cluster_embeddings, dtype=np.float64)
    if X.ndim != 2 or len(X) < 1:
        raise ValueError("cluster must contain at least one embedding")
    sims = -np.sqrt(_sq_dists(X, X))
    logits = sims / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return PropagationWeights(w=w, tau=tau)


def propagate(cluster_targets: list[tuple[int, int]],
              weights: PropagationWeights, rounds: int = DEFAULT_ROUNDS,
              num_items: int = 0) -> dict[int, SoftTarget]:
    """Run the half-keep update for ``rounds`` steps and sparsify.

    Distributions are kept on the cluster's label set only; rows are
    renormalized at the end to absorb float drift.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    size = len(cluster_targets)
    if weights.w.shape != (size, size):
        raise ValueError("weight matrix does not match cluster size")
    ys = np.array([y for _, y in cluster_targets], dtype=np.int64)
    support, col = np.unique(ys, return_inverse=True)

    q0 = np.zeros((size, len(support)))
    q0[np.arange(size), col] = 1.0
    q = q0.copy()
    for _ in range(rounds):
        q = 0.5 * (weights.w @ q) + 0.5 * q0
    q /= q.sum(axis=1, keepdims=True)

    out: dict[int, SoftTarget] = {}
    for row, (sample_id, y) in enumerate(cluster_targets):
        mask = q[row] > 0.0
        out[sample_id] = SoftTarget(items=support[mask], probs=q[row][mask],
                                    y=int(y), num_items=num_items)
    return out


def _split_oversized(embeddings, indices, cap, seed):
    """Recursively sub-cluster index groups larger than cap."""
    if len(indices) <= cap:
        return [indices]
    sub_k = int(np.ceil(len(indices) / cap))
    sub = kmeans(embeddings[indices], sub_k, seed=seed)
    out = []
    for c in range(sub_k):
        members = indices[sub.assignment == c]
        if len(members):
            out.extend(_split_oversized(embeddings, members, cap, seed + 1 + c))
    return out


def generate_lp(embeddings: np.ndarray, samples, k: int,
                tau: float = DEFAULT_TAU, rounds: int = DEFAULT_ROUNDS,
                seed: int = 0, cluster_cap: int = CLUSTER_CAP,
                num_items: int = 0) -> SoftTargetSet:
    """Label-propagation targets: cluster the sample representations, then
    propagate within each cluster independently."""
    if len(embeddings) != len(samples):
        raise ValueError("embeddings and samples must align row-for-row")
    clusters = kmeans(embeddings, k, seed=seed)
    targets: dict[int, SoftTarget] = {}
    for c in range(k):
        members = np.flatnonzero(clusters.assignment == c)
        if not len(members):
            continue
        for group in _split_oversized(embeddings, members, cluster_cap, seed):
            weights = propagation_weights(embeddings[group], tau)
            pairs = [(samples[i].sample_id, samples[i].y) for i in group]
            targets.update(propagate(pairs, weights, rounds, num_items))
    return SoftTargetSet(targets=targets, generator="LP",
                         params={"k": k, "tau": tau, "rounds": rounds},
                         num_items=num_items)


def generate_pop(train_samples, half_weight: float = 0.5,
                 num_items: int = 0) -> SoftTargetSet:
    """Half own-label, half empirical popularity of training targets."""
    if not train_samples:
        raise ValueError("popularity prior needs a non-empty training set")
    ys = np.array([s.y for s in train_samples], dtype=np.int64)
    support, counts = np.unique(ys, return_counts=True)
    pop = counts / counts.sum()

    targets: dict[int, SoftTarget] = {}
    for s in train_samples:
        probs = (1.0 - half_weight) * pop.copy()
        probs[np.searchsorted(support, s.y)] += half_weight
        targets[s.sample_id] = SoftTarget(items=support.copy(), probs=probs,
                                          y=int(s.y), num_items=num_items)
    return SoftTargetSet(targets=targets, generator="POP",
                         params={"half_weight": half_weight},
                         num_items=num_items)


def generate_ls(train_samples, epsilon: float, num_items: int) -> SoftTargetSet:
    targets = {s.sample_id: make_uniform_smoothing(s.y, num_items, epsilon)
               for s in train_samples}
    return SoftTargetSet(targets=targets, generator="LS",
                         params={"epsilon": epsilon}, num_items=num_items)


def generate_onehot(train_samples, num_items: int) -> SoftTargetSet:
    targets = {s.sample_id: onehot_target(s.y, num_items) for s in train_samples}
    return SoftTargetSet(targets=targets, generator="NONE",
                         params={}, num_items=num_items)


def save_targets(target_set: SoftTargetSet, path) -> None:
    """One record per sample; probabilities printed at round-trip precision.
    Records with a uniform-mass marker carry it as a fourth column."""
    p = target_set.params
    header = (
        f"#targets\tv{TARGET_FILE_VERSION}\tgenerator={target_set.generator}"
        f"\tk={p.get('k', 0)}\ttau={p.get('tau', 0.0)!r}"
        f"\trounds={p.get('rounds', 0)}\tepsilon={p.get('epsilon', 0.0)!r}"
        f"\tn={len(target_set.targets)}\tm={target_set.num_items}"
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for sample_id in sorted(target_set.targets):
            t = target_set.targets[sample_id]
            entries = ",".join(
                f"{int(i)}:{float(pr)!r}" for i, pr in zip(t.items, t.probs))
            line = f"{sample_id}\t{t.y}\t{entries}"
            if t.uniform_mass > 0.0:
                line += f"\t{t.uniform_mass!r}"
            fh.write(line + "\n")


def load_targets(path) -> SoftTargetSet:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split("\t")
        if len(fields) < 9 or fields[0] != "#targets":
            raise ParseError(f"not a soft-target file: {path}", 1)
        if fields[1] != f"v{TARGET_FILE_VERSION}":
            raise ParseError(f"unsupported target-file version {fields[1]}", 1)
        meta = dict(f.split("=", 1) for f in fields[2:])
        generator = meta["generator"]
        n = int(meta["n"])
        num_items = int(meta["m"])
        params = {}
        if generator == "LP":
            params = {"k": int(meta["k"]), "tau": float(meta["tau"]),
                      "rounds": int(meta["rounds"])}
        elif generator == "LS":
            params = {"epsilon": float(meta["epsilon"])}

        targets: dict[int, SoftTarget] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ParseError("expected 3 or 4 columns", lineno)
            sample_id, y = int(cols[0]), int(cols[1])
            items, probs = [], []
            if cols[2]:
                for entry in cols[2].split(","):
                    item, prob = entry.split(":")
                    items.append(int(item))
                    probs.append(float(prob))
            uniform = float(cols[3]) if len(cols) == 4 else 0.0
            targets[sample_id] = SoftTarget(
                items=np.array(items, dtype=np.int64),
                probs=np.array(probs, dtype=np.float64),
                y=y, uniform_mass=uniform, num_items=num_items)
    if len(targets) != n:
        raise ParseError(
            f"truncated target file: header says {n} records, found {len(targets)}")
    return SoftTargetSet(targets=targets, generator=generator,
                         params=params, num_items=num_items)
