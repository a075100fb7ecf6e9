"""Training objectives over full-softmax predictions and soft targets.

Four objectives share one interface (scalar loss + gradient w.r.t. logits):

* ``ce_onehot``        -- cross-entropy against the hard label.
* ``soft_cross_entropy`` -- cross-entropy against a soft target (label
  smoothing baseline).
* ``coupled_loss``     -- lambda1 * KL(q||p) + (1-lambda1) * CE, the
  traditional mixture of soft and hard supervision.
* ``decoupled_loss``   -- reweights the two pieces the coupled loss splits
  into: a binomial "target confidence" KL and a KL between the
  renormalized non-target distributions.

The split is exact: for target confidence a = lambda1*q_y + 1 - lambda1,

    coupled = KL(B(a) || B(p_y)) + lambda1*(1-q_y) * KL(q_hat || p_hat) + C(q)

where q_hat_i = q_i/(1-q_y) and p_hat_i = p_i/(1-p_y) over i != y, and C(q)
does not depend on the model.  ``verify_decomposition`` and
``verify_redline`` check the identity and its gradient-level consequence
numerically.

All divergences use natural logarithms.  Gradients are returned w.r.t. the
pre-softmax logits, so model code never sees loss internals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

EPS_LOG = 1e-12

LOSS_MODES = ("CE", "LS", "COUPLED", "DECOUPLED")


@dataclass
class SoftTarget:
    """Sparse probability distribution over items, carrying its target item.

    ``items``/``probs`` hold the explicit support.  ``uniform_mass`` is an
    optional extra mass spread evenly over all ``num_items`` items (used by
    label smoothing so q never needs m stored entries).
    """

    items: np.ndarray
    probs: np.ndarray
    y: int
    uniform_mass: float = 0.0
    num_items: int = 0

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)

    @property
    def q_y(self) -> float:
        q = float(self.probs[self.items == self.y].sum())
        if self.uniform_mass > 0.0:
            q += self.uniform_mass / self.num_items
        return q

    def total_mass(self) -> float:
        return float(self.probs.sum()) + self.uniform_mass

    def dense(self, m: int) -> np.ndarray:
        """Full-length probability vector."""
        if self.uniform_mass > 0.0 and self.num_items and m != self.num_items:
            raise ContractViolation(
                f"soft target built for {self.num_items} items, asked for {m}"
            )
        q = np.zeros(m, dtype=np.float64)
        np.add.at(q, self.items, self.probs)
        if self.uniform_mass > 0.0:
            q += self.uniform_mass / m
        return q


def onehot_target(y: int, m: int = 0) -> SoftTarget:
    """Degenerate soft target with all mass on the label."""
    return SoftTarget(items=np.array([y]), probs=np.array([1.0]), y=y, num_items=m)


def validate_soft_target(q: SoftTarget, atol: float = 1e-9) -> None:
    """Raise if q is not a valid distribution containing its own target."""
    if q.probs.shape != q.items.shape:
        raise ContractViolation("items/probs length mismatch")
    if np.any(q.probs <= 0.0) or q.uniform_mass < 0.0:
        raise ContractViolation("soft target entries must be positive")
    if abs(q.total_mass() - 1.0) > atol:
        raise ContractViolation(f"soft target mass {q.total_mass()} != 1")
    if q.uniform_mass > 0.0 and q.num_items < 1:
        raise ContractViolation("uniform mass requires num_items")
    if q.q_y <= 0.0:
        raise ContractViolation("target item missing from soft target support")


@dataclass
class LossConfig:
    """Objective selection plus its trade-off knobs."""

    mode: str = "CE"
    lambda1: float = 0.5
    lambda2: float = 0.5
    epsilon: float = 0.1
    eps_log: float = EPS_LOG

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if not (0.0 <= self.lambda1 <= 1.0 and 0.0 <= self.lambda2 <= 1.0):
            raise ValueError("lambda1 and lambda2 must lie in [0, 1]")
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError("epsilon must lie in [0, 1)")
        if self.eps_log <= 0.0:
            raise ValueError("eps_log must be positive")


@dataclass
class LossDecomposition:
    """The coupled loss split into its two KL pieces plus model-free remainder.

    ``target_confidence`` is the Bernoulli parameter a = lambda1*q_y + 1 -
    lambda1; ``nontarget_weight`` is lambda1*(1-q_y) = 1-a.
    """

    target_confidence: float
    kl_target: float
    kl_nontarget: float
    nontarget_weight: float
    label_constant: float


def _log(x, eps: float = EPS_LOG):
    return np.log(np.maximum(x, eps))


def ce_onehot(p: np.ndarray, y: int, eps: float = EPS_LOG):
    """Hard-label cross-entropy: -log p_y, gradient p - onehot(y)."""
    loss = float(-_log(p[y], eps))
    grad = p.copy()
    grad[y] -= 1.0
    return loss, grad


def soft_cross_entropy(p: np.ndarray, q: SoftTarget, eps: float = EPS_LOG):
    """Cross-entropy against a soft target: -sum_i q_i log p_i."""
    m = len(p)
    if q.uniform_mass > 0.0:
        loss = float(-np.sum(q.dense(m) * _log(p, eps)))
    else:
        loss = float(-np.sum(q.probs * _log(p[q.items], eps)))
    grad = p - q.dense(m)
    return loss, grad


def make_uniform_smoothing(y: int, m: int, epsilon: float) -> SoftTarget:
    """Label-smoothed target (1-epsilon)*onehot(y) + epsilon*uniform(m).

    The uniform part is kept as a marker, not m explicit entries.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    if epsilon == 0.0:
        return onehot_target(y, m)
    return SoftTarget(
        items=np.array([y]),
        probs=np.array([1.0 - epsilon]),
        y=y,
        uniform_mass=epsilon,
        num_items=m,
    )


def _kl_sparse_vs_dense(q: SoftTarget, p: np.ndarray, eps: float) -> float:
    """KL(q||p); zero-probability q entries contribute nothing."""
    if q.uniform_mass > 0.0:
        qd = q.dense(len(p))
        return float(np.sum(qd * (_log(qd, eps) - _log(p, eps))))
    return float(
        np.sum(q.probs * (np.log(q.probs) - _log(p[q.items], eps)))
    )


def coupled_loss(p: np.ndarray, q: SoftTarget, y: int, lambda1: float,
                 eps: float = EPS_LOG):
    """Mixture lambda1*KL(q||p) + (1-lambda1)*(-log p_y).

    Gradient w.r.t. logits is p - (lambda1*q + (1-lambda1)*onehot(y)).
    """
    if q.y != y or q.q_y <= 0.0:
        raise ContractViolation("target item not in soft-target support")
    m = len(p)
    kl = _kl_sparse_vs_dense(q, p, eps)
    loss = lambda1 * kl + (1.0 - lambda1) * float(-_log(p[y], eps))
    grad = p.copy()
    if q.uniform_mass > 0.0:
        grad -= lambda1 * q.uniform_mass / m
    np.add.at(grad, q.items, -lambda1 * q.probs)
    grad[y] -= 1.0 - lambda1
    return loss, grad


def decompose(p: np.ndarray, q: SoftTarget, y: int, lambda1: float,
              eps: float = EPS_LOG) -> LossDecomposition:
    """Split the coupled loss into target-confidence and non-target KLs."""
    if q.y != y or q.q_y <= 0.0:
        raise ContractViolation("target item not in soft-target support")
    q_y = q.q_y
    a = lambda1 * q_y + 1.0 - lambda1
    p_y = float(np.clip(p[y], eps, 1.0 - eps))

    kl_target = a * (np.log(a) - np.log(p_y))
    if a < 1.0:
        kl_target += (1.0 - a) * (np.log(1.0 - a) - np.log(1.0 - p_y))
    kl_target = float(kl_target)

    nontarget_weight = lambda1 * (1.0 - q_y)
    if q_y >= 1.0:
        kl_nontarget = 0.0
        nontarget_weight = 0.0
    else:
        m = len(p)
        q_hat = q.dense(m)
        q_hat[y] = 0.0
        q_hat /= 1.0 - q_y
        p_hat = p / max(1.0 - p_y, eps)
        support = q_hat > 0.0
        support[y] = False
        kl_nontarget = float(
            np.sum(q_hat[support] * (np.log(q_hat[support]) - _log(p_hat[support], eps)))
        )

    total, _ = coupled_loss(p, q, y, lambda1, eps)
    label_constant = total - kl_target - nontarget_weight * kl_nontarget
    return LossDecomposition(
        target_confidence=float(a),
        kl_target=kl_target,
        kl_nontarget=kl_nontarget,
        nontarget_weight=float(nontarget_weight),
        label_constant=float(label_constant),
    )


def _decomposition_grads(p: np.ndarray, q: SoftTarget, y: int, lambda1: float,
                         eps: float = EPS_LOG):
    """Analytic logit-gradients of the two KL pieces.

    Target piece: grad_y = p_y - a, grad_j = p_j*(a - (1-a)*p_y/(1-p_y)).
    Non-target piece: grad_y = 0, grad_j = p_hat_j - q_hat_j (the
    renormalized prediction is invariant to the target logit).
    """
    q_y = q.q_y
    a = lambda1 * q_y + 1.0 - lambda1
    p_y = float(p[y])
    one_minus_py = max(1.0 - p_y, eps)

    g_target = p * (a - (1.0 - a) * p_y / one_minus_py)
    g_target[y] = p_y - a

    m = len(p)
    g_nontarget = np.zeros(m, dtype=np.float64)
    if q_y < 1.0:
        g_nontarget = p / one_minus_py
        qd = q.dense(m)
        qd[y] = 0.0
        g_nontarget -= qd / (1.0 - q_y)
        g_nontarget[y] = 0.0
    return g_target, g_nontarget


def decoupled_loss(p: np.ndarray, q: SoftTarget, y: int, lambda1: float,
                   lambda2: float, eps: float = EPS_LOG):
    """Reweighted objective lambda2 * KL_target + (1-lambda2) * KL_nontarget."""
    parts = decompose(p, q, y, lambda1, eps)
    loss = lambda2 * parts.kl_target + (1.0 - lambda2) * parts.kl_nontarget
    g_target, g_nontarget = _decomposition_grads(p, q, y, lambda1, eps)
    grad = lambda2 * g_target + (1.0 - lambda2) * g_nontarget
    return loss, grad


def compute_loss(p: np.ndarray, q: SoftTarget | None, y: int,
                 config: LossConfig):
    """Dispatch on the configured mode; returns (loss, grad_logits)."""
    if config.mode == "CE":
        return ce_onehot(p, y, config.eps_log)
    if q is None:
        raise ContractViolation(f"mode {config.mode} requires a soft target")
    if config.mode == "LS":
        return soft_cross_entropy(p, q, config.eps_log)
    if config.mode == "COUPLED":
        return coupled_loss(p, q, y, config.lambda1, config.eps_log)
    return decoupled_loss(p, q, y, config.lambda1, config.lambda2, config.eps_log)


def finite_difference_grad(fn, z: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of the logits."""
    grad = np.zeros_like(z)
    for j in range(len(z)):
        zp = z.copy()
        zp[j] += h
        zm = z.copy()
        zm[j] -= h
        grad[j] = (fn(zp) - fn(zm)) / (2.0 * h)
    return grad


def _softmax(z: np.ndarray) -> np.ndarray:
    zc = z - z.max()
    e = np.exp(zc)
    return e / e.sum()


def verify_decomposition(p: np.ndarray, q: SoftTarget, y: int, lambda1: float,
                         tol: float = 1e-6, eps: float = EPS_LOG):
    """Check that the two-KL split reproduces the coupled loss and gradient.

    Returns (ok, max_residual).  The value identity holds by construction
    (the remainder is defined as the difference); the substantive check is
    that the logit-gradient of the coupled loss equals the gradient of
    kl_target + nontarget_weight * kl_nontarget, both analytically and by
    central finite differences through the softmax.
    """
    parts = decompose(p, q, y, lambda1, eps)
    total, grad_coupled = coupled_loss(p, q, y, lambda1, eps)
    value_residual = abs(
        total
        - (parts.kl_target + parts.nontarget_weight * parts.kl_nontarget
           + parts.label_constant)
    )

    g_target, g_nontarget = _decomposition_grads(p, q, y, lambda1, eps)
    grad_split = g_target + parts.nontarget_weight * g_nontarget
    analytic_residual = float(np.max(np.abs(grad_coupled - grad_split)))

    z = np.log(np.maximum(p, eps))

    def coupled_at(zv):
        return coupled_loss(_softmax(zv), q, y, lambda1, eps)[0]

    def split_at(zv):
        d = decompose(_softmax(zv), q, y, lambda1, eps)
        return d.kl_target + d.nontarget_weight * d.kl_nontarget

    fd_residual = float(np.max(np.abs(
        finite_difference_grad(coupled_at, z) - finite_difference_grad(split_at, z)
    )))

    residual = max(value_residual, analytic_residual, fd_residual)
    return residual <= tol, residual


def redline_lambda2(lambda1: float, q_y: float) -> float:
    """Reweighting at which the decoupled family reproduces the coupled loss.

    Equals 1 / (1 + lambda1 * (1 - q_y)).
    """
    return 1.0 / (1.0 + lambda1 * (1.0 - q_y))


def redline_residual(p: np.ndarray, q: SoftTarget, y: int, lambda1: float,
                     eps: float = EPS_LOG) -> float:
    """Max elementwise gap between the decoupled gradient at the coupled-
    equivalent lambda2 and that lambda2 times the coupled gradient."""
    lam2 = redline_lambda2(lambda1, q.q_y)
    _, grad_dec = decoupled_loss(p, q, y, lambda1, lam2, eps)
    _, grad_cpl = coupled_loss(p, q, y, lambda1, eps)
    return float(np.max(np.abs(grad_dec - lam2 * grad_cpl)))


def verify_redline(p: np.ndarray, q: SoftTarget, y: int, lambda1: float,
                   tol: float = 1e-8, eps: float = EPS_LOG) -> bool:
    """True iff the coupled loss sits on the decoupled family as a
    positively rescaled gradient, within tol."""
    return redline_residual(p, q, y, lambda1, eps) <= tol
