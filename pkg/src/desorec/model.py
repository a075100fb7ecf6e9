"""Two small full-softmax recommenders behind one interface.

``dot_factorization`` scores a user embedding against output item
embeddings; ``mean_pool_encoder`` averages the input embeddings of the
history, applies a single projection layer with tanh, and scores the result
the same way.  Both expose forward / score / analytic backward plus Adam
updates, and a batched path the trainer uses; the per-sample operations are
batch-of-one wrappers so there is a single code path to test.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericError

KINDS = ("dot_factorization", "mean_pool_encoder")

# activation name -> (function, derivative expressed through the output)
_ACTIVATIONS = {
    "tanh": (np.tanh, lambda rep: 1.0 - rep * rep),
    "identity": (lambda x: x, lambda rep: np.ones_like(rep)),
}


@dataclass
class ModelParams:
    kind: str
    d: int
    item_in: np.ndarray                 # m x d input embeddings
    item_out: np.ndarray                # m x d score embeddings
    user_emb: np.ndarray | None = None  # user_count x d (dot_factorization)
    proj: np.ndarray | None = None      # d x d (mean_pool_encoder)
    bias: np.ndarray | None = None      # d   (mean_pool_encoder)

    @property
    def num_items(self) -> int:
        return self.item_out.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"item_in": self.item_in, "item_out": self.item_out}
        if self.user_emb is not None:
            out["user_emb"] = self.user_emb
        if self.proj is not None:
            out["proj"] = self.proj
            out["bias"] = self.bias
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class AdamState:
    """First/second-moment accumulators congruent with the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class PredictionDistribution:
    probs: np.ndarray
    log_probs: np.ndarray


@dataclass
class Gradients:
    """Sparse-touch gradients: dense for item_out (every logit moves every
    row), row-indexed for the embedding tables a sample actually reads."""

    item_out: np.ndarray
    user_rows: tuple[np.ndarray, np.ndarray] | None = None
    item_in_rows: tuple[np.ndarray, np.ndarray] | None = None
    proj: np.ndarray | None = None
    bias: np.ndarray | None = None

    def all_finite(self) -> bool:
        parts = [self.item_out]
        if self.user_rows is not None:
            parts.append(self.user_rows[1])
        if self.item_in_rows is not None:
            parts.append(self.item_in_rows[1])
        if self.proj is not None:
            parts.extend([self.proj, self.bias])
        return all(np.isfinite(p).all() for p in parts)

    def max_abs(self) -> float:
        out = float(np.abs(self.item_out).max(initial=0.0))
        if self.user_rows is not None and len(self.user_rows[1]):
            out = max(out, float(np.abs(self.user_rows[1]).max()))
        if self.item_in_rows is not None and len(self.item_in_rows[1]):
            out = max(out, float(np.abs(self.item_in_rows[1]).max()))
        if self.proj is not None:
            out = max(out, float(np.abs(self.proj).max()),
                      float(np.abs(self.bias).max()))
        return out


@dataclass
class BatchInputs:
    """Flattened view of a list of samples for vectorized model calls."""

    user_ids: np.ndarray
    targets: np.ndarray
    hist_flat: np.ndarray     # all histories concatenated
    hist_lengths: np.ndarray
    row_index: np.ndarray     # row of each hist_flat entry

    @classmethod
    def from_samples(cls, samples) -> "BatchInputs":
        user_ids = np.array([s.user_id for s in samples], dtype=np.int64)
        targets = np.array([s.y for s in samples], dtype=np.int64)
        lengths = np.array([len(s.history) for s in samples], dtype=np.int64)
        if len(samples):
            hist_flat = np.concatenate(
                [np.asarray(s.history, dtype=np.int64) for s in samples])
        else:
            hist_flat = np.zeros(0, dtype=np.int64)
        row_index = np.repeat(np.arange(len(samples), dtype=np.int64), lengths)
        return cls(user_ids, targets, hist_flat, lengths, row_index)

    def __len__(self) -> int:
        return len(self.user_ids)


def init_params(kind: str, m: int, user_count: int, d: int,
                seed: int) -> ModelParams:
    """Uniform init in [-1/sqrt(d), 1/sqrt(d)], deterministic given seed."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape)

    params = ModelParams(kind=kind, d=d, item_in=draw(m, d), item_out=draw(m, d))
    if kind == "dot_factorization":
        params.user_emb = draw(user_count, d)
    else:
        params.proj = draw(d, d)
        params.bias = draw(d)
    return params


def forward_batch(params: ModelParams, batch: BatchInputs,
                  activation: str = "tanh") -> np.ndarray:
    """Per-sample representations, stacked n x d."""
    if params.kind == "dot_factorization":
        return params.user_emb[batch.user_ids].copy()
    if np.any(batch.hist_lengths == 0):
        raise ContractViolation("mean_pool_encoder requires a non-empty history")
    act, _ = _ACTIVATIONS[activation]
    sums = np.zeros((len(batch), params.d))
    np.add.at(sums, batch.row_index, params.item_in[batch.hist_flat])
    means = sums / batch.hist_lengths[:, None]
    return act(means @ params.proj.T + params.bias)


def forward(params: ModelParams, sample, activation: str = "tanh") -> np.ndarray:
    """Representation vector for one sample."""
    return forward_batch(params, BatchInputs.from_samples([sample]), activation)[0]


def score_batch(params: ModelParams, reps: np.ndarray):
    """Full-catalog probabilities and log-probabilities, log-sum-exp safe."""
    logits = reps @ params.item_out.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    return np.exp(log_probs), log_probs


def score_and_softmax(params: ModelParams,
                      representation: np.ndarray) -> PredictionDistribution:
    probs, log_probs = score_batch(params, representation[None, :])
    return PredictionDistribution(probs=probs[0], log_probs=log_probs[0])


def backward_batch(params: ModelParams, batch: BatchInputs, reps: np.ndarray,
                   grad_logits: np.ndarray,
                   activation: str = "tanh") -> Gradients:
    """Chain grad w.r.t. logits back through scoring and the encoder.

    grad_logits rows are dense, so item_out receives a dense gradient;
    only the embedding rows the batch touches get entries.
    """
    grad_item_out = grad_logits.T @ reps
    grad_reps = grad_logits @ params.item_out

    if params.kind == "dot_factorization":
        users, inverse = np.unique(batch.user_ids, return_inverse=True)
        acc = np.zeros((len(users), params.d))
        np.add.at(acc, inverse, grad_reps)
        return Gradients(item_out=grad_item_out, user_rows=(users, acc))

    _, dact = _ACTIVATIONS[activation]
    sums = np.zeros((len(batch), params.d))
    np.add.at(sums, batch.row_index, params.item_in[batch.hist_flat])
    means = sums / batch.hist_lengths[:, None]

    grad_pre = grad_reps * dact(reps)
    grad_proj = grad_pre.T @ means
    grad_bias = grad_pre.sum(axis=0)
    grad_means = grad_pre @ params.proj

    contrib = grad_means[batch.row_index] / batch.hist_lengths[batch.row_index, None]
    items, inverse = np.unique(batch.hist_flat, return_inverse=True)
    acc = np.zeros((len(items), params.d))
    np.add.at(acc, inverse, contrib)
    return Gradients(item_out=grad_item_out, item_in_rows=(items, acc),
                     proj=grad_proj, bias=grad_bias)


def backward(params: ModelParams, sample, grad_logits: np.ndarray,
             activation: str = "tanh") -> Gradients:
    batch = BatchInputs.from_samples([sample])
    reps = forward_batch(params, batch, activation)
    return backward_batch(params, batch, reps, grad_logits[None, :], activation)


def init_adam(params: ModelParams, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    zeros = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    return AdamState(m=zeros, v={k: np.zeros_like(a) for k, a in params.arrays().items()},
                     beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ModelParams, state: AdamState, grads: Gradients,
              lr: float):
    """One Adam update in place.  Rows without gradients keep stale moments
    (lazy sparse Adam); bias correction uses the global step counter."""
    if not grads.all_finite():
        raise NumericError("non-finite gradient, aborting optimizer step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t

    def dense(name, target, g):
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        target -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)

    def rows(name, target, ids, g):
        m = state.m[name]
        v = state.v[name]
        m[ids] = b1 * m[ids] + (1.0 - b1) * g
        v[ids] = b2 * v[ids] + (1.0 - b2) * (g * g)
        target[ids] -= lr * (m[ids] / c1) / (np.sqrt(v[ids] / c2) + state.eps)

    dense("item_out", params.item_out, grads.item_out)
    if grads.user_rows is not None:
        rows("user_emb", params.user_emb, *grads.user_rows)
    if grads.item_in_rows is not None:
        rows("item_in", params.item_in, *grads.item_in_rows)
    if grads.proj is not None:
        dense("proj", params.proj, grads.proj)
        dense("bias", params.bias, grads.bias)
    return params, state


def embed_samples(params: ModelParams, samples,
                  activation: str = "tanh") -> np.ndarray:
    """Representation matrix, one row per sample in input order."""
    return forward_batch(params, BatchInputs.from_samples(samples), activation)


CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    np.savez(path, version=CHECKPOINT_VERSION, kind=params.kind, d=params.d,
             **params.arrays())


def load_checkpoint(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        kind = str(data["kind"])
        params = ModelParams(
            kind=kind, d=int(data["d"]),
            item_in=data["item_in"], item_out=data["item_out"],
            user_emb=data["user_emb"] if "user_emb" in data else None,
            proj=data["proj"] if "proj" in data else None,
            bias=data["bias"] if "bias" in data else None,
        )
    return params
