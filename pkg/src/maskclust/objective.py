"""Clustering-based training targets and the two losses.

Teacher patch embeddings are scored against a learned codebook of
prototypes; softmax over the scores gives soft cluster assignments, and
Sinkhorn-Knopp balancing of the same scores gives the (gradient-free)
targets. The clustering loss trains only the prototypes; the masked
prediction loss trains only the network. Balancing can run over the whole
batch (standard) or independently at each lattice position, which strips
positional information from the targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

# floor applied to probabilities inside every log in this module
PROB_FLOOR = 1e-12


class ClusterHead(nn.Module):
    """Prototype matrix plus the temperatures and balancing setting.

    centroids rows are the prototypes; tau_student scales the softmax that
    produces trainable assignments (and the student's prediction softmax),
    tau_teacher scales the exponential inside Sinkhorn-Knopp.
    """

    def __init__(
        self,
        n_prototypes: int,
        dim: int,
        rng: np.random.Generator,
        tau_student: float = 0.12,
        tau_teacher: float = 0.06,
        sk_iters: int = 3,
    ):
        if n_prototypes < 2:
            raise ValueError("need at least 2 prototypes")
        if tau_student <= 0 or tau_teacher <= 0:
            raise ValueError("temperatures must be positive")
        if sk_iters < 1:
            raise ValueError("sk_iters must be >= 1")
        self.centroids = nn.Param(nn.xavier_uniform((n_prototypes, dim), rng))
        self.tau_student = tau_student
        self.tau_teacher = tau_teacher
        self.sk_iters = sk_iters

    @property
    def prototype_count(self) -> int:
        return self.centroids.value.shape[0]


@dataclass
class Assignments:
    """Rows of cluster probabilities, one per token.

    grouping optionally records each token's lattice position index, set
    by position-wise balancing and consumed by the mutual-information
    helpers.
    """

    probs: np.ndarray
    grouping: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("probs must be 2-D (tokens x prototypes)")
        if np.any(self.probs < 0):
            raise ValueError("assignment probabilities must be nonnegative")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("assignment rows must sum to 1 within 1e-6")
        if self.grouping is not None:
            self.grouping = np.asarray(self.grouping)
            if self.grouping.shape != (len(self.probs),):
                raise ValueError("grouping must assign one position per row")

    def __len__(self):
        return len(self.probs)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows; a zero-norm row is a degenerate input, not an
    epsilon case."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < np.finfo(np.float64).tiny):
        raise ValueError("degenerate input: zero-norm feature row")
    return x / norms


def compute_logits(x: np.ndarray, head: ClusterHead) -> np.ndarray:
    """Prototype scores of L2-normalized features: rows of x_hat @ C^T."""
    return normalize_rows(x) @ head.centroids.value.T


def soft_assign(logits: np.ndarray, tau: float) -> Assignments:
    """Temperature softmax over prototypes, per token."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    flat = np.asarray(logits, dtype=np.float64).reshape(-1, logits.shape[-1])
    return Assignments(nn.softmax(flat / tau))


def _sinkhorn_body(m: np.ndarray, iters: int, p: int) -> np.ndarray:
    # pinned order: column step (normalize then scale by 1/p), row step;
    # one extra row normalization after the last iteration. Tokens live on
    # axis 0 in both the 2-D and the batched per-position layout.
    for _ in range(iters):
        m = m / m.sum(axis=0, keepdims=True)
        m = m * (1.0 / p)
        m = m / m.sum(axis=-1, keepdims=True)
    return m / m.sum(axis=-1, keepdims=True)


def sinkhorn_standard(logits: np.ndarray, tau: float, iters: int) -> Assignments:
    """Balanced assignments over one pool of tokens.

    The exponential is stabilized by subtracting the global max of the
    logit matrix. No gradient flows through this operation; callers treat
    the result as a constant.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("expected a nonempty tokens x prototypes matrix")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if tau <= 0 or iters < 1:
        raise ValueError("tau must be positive and iters >= 1")
    m = np.exp((logits - logits.max()) / tau)
    return Assignments(_sinkhorn_body(m, iters, logits.shape[1]))


def sinkhorn_positionwise(logits: np.ndarray, tau: float, iters: int) -> Assignments:
    """Run the balancing independently at every lattice position.

    logits: (batch, positions, prototypes). Each position's batch-slice is
    balanced exactly as in sinkhorn_standard, including its own max shift.
    Returned rows are flattened in (batch, position) order with grouping
    set to the position index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] < 1:
        raise ValueError("expected batch x positions x prototypes logits")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if tau <= 0 or iters < 1:
        raise ValueError("tau must be positive and iters >= 1")
    b, n, p = logits.shape
    shift = logits.max(axis=(0, 2), keepdims=True)
    m = np.exp((logits - shift) / tau)
    m = _sinkhorn_body(m, iters, p)
    return Assignments(m.reshape(b * n, p), grouping=np.tile(np.arange(n), b))


def clustering_loss(assign_sk: Assignments, assign_soft: Assignments) -> float:
    """Cross-entropy from balanced targets to the trainable softmax,
    averaged over tokens. Targets are constants."""
    a_prime, a = assign_sk.probs, assign_soft.probs
    if a_prime.shape != a.shape:
        raise ValueError("assignment shapes differ")
    return float(-np.mean(np.sum(a_prime * np.log(np.maximum(a, PROB_FLOOR)), axis=1)))


def clustering_grad_centroids(
    x: np.ndarray, assign_soft: Assignments, assign_sk: Assignments, tau: float
) -> np.ndarray:
    """Analytic d(clustering_loss)/d(centroids).

    The softmax cross-entropy gradient w.r.t. the logits is (a - a') / (T tau);
    the chain rule through logits = x_hat @ C^T leaves dC = dlogits^T @ x_hat.
    Exact wherever the probability floor is inactive.
    """
    x_hat = normalize_rows(x).reshape(-1, x.shape[-1])
    dlogits = (assign_soft.probs - assign_sk.probs) / (len(assign_soft) * tau)
    return dlogits.T @ x_hat


def mim_loss(
    predictions: np.ndarray,
    targets: np.ndarray,
    student_head: nn.Linear,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Masked-prediction cross-entropy.

    predictions: (..., d) predictor outputs at masked positions; targets:
    (..., p) constant assignment rows at the same positions. Returns
    (loss, student probabilities); the head's forward cache is left primed
    for mim_backward.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    preds = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("need at least one prediction")
    logits = student_head.forward(preds)
    if logits.shape != tgt.shape:
        raise ValueError("targets do not match the student logit shape")
    probs = nn.softmax(logits / tau)
    flat_t = tgt.reshape(-1, tgt.shape[-1])
    flat_p = probs.reshape(-1, tgt.shape[-1])
    loss = float(-np.mean(np.sum(flat_t * np.log(np.maximum(flat_p, PROB_FLOOR)), axis=1)))
    return loss, probs


def mim_backward(
    probs: np.ndarray, targets: np.ndarray, student_head: nn.Linear, tau: float
) -> np.ndarray:
    """Gradient of mim_loss into the predictions; accumulates the head's
    weight gradient on the way through."""
    n_rows = int(np.prod(probs.shape[:-1]))
    dlogits = (probs - targets) / (n_rows * tau)
    return student_head.backward(dlogits)


# -- assignment statistics ----------------------------------------------------


def mean_entropy(assignments: Assignments) -> float:
    """Average per-row entropy in nats; ln p signals fully uniform rows."""
    p = assignments.probs
    return float(-np.mean(np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=1)))


def hard_assignments(assignments: Assignments) -> np.ndarray:
    """Argmax cluster index per token (ties to the lowest index)."""
    return np.argmax(assignments.probs, axis=1)


def _mi_nats(joint: np.ndarray) -> float:
    pj = joint.sum(axis=1, keepdims=True)
    pk = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pj @ pk)[nz])))


def assignment_position_mi(assignments: Assignments) -> float:
    """Mutual information (nats) between position and soft cluster mass.

    The joint distribution spreads each token's probability row over its
    grouping index; zero when every position induces the same cluster
    marginal.
    """
    if assignments.grouping is None:
        raise ValueError("assignments carry no position grouping")
    g = np.asarray(assignments.grouping, dtype=np.int64)
    joint = np.zeros((int(g.max()) + 1, assignments.probs.shape[1]))
    np.add.at(joint, g, assignments.probs)
    joint /= joint.sum()
    return _mi_nats(joint)


def mi_from_counts(counts: np.ndarray) -> float:
    """Bias-corrected mutual information of a (position x cluster) count
    table, in nats.

    The plug-in estimate on a short window overstates MI by roughly
    (rows - 1)(cols - 1) / (2 N) nats (counting only occupied rows and
    columns), so that Miller-Madow term is subtracted and the result
    clamped at zero.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        return 0.0
    joint = counts / n
    r = int(np.count_nonzero(joint.sum(axis=1)))
    c = int(np.count_nonzero(joint.sum(axis=0)))
    return max(_mi_nats(joint) - (r - 1) * (c - 1) / (2.0 * n), 0.0)
