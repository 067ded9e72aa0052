"""Queue-augmented contrastive loss over normalized embeddings.

Each batch row anchors at a simulated-curve embedding; its denominator sums
the in-batch operational embeddings plus K sampled queue negatives.  The
temperature is learnable through its log (tau = exp(theta_tau) stays
positive).  Loss and all gradients are exact and computed with log-sum-exp
stabilization.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_UNIT_TOL = 1e-8


def _check_unit_rows(name: str, arr: np.ndarray) -> None:
    if arr.size == 0:
        return
    norms = np.linalg.norm(arr, axis=-1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > _UNIT_TOL:
        raise ContractError(
            f"{name} must be L2-normalized (worst deviation {worst:.2e})")


class NegativeQueue:
    """Pool of stored normalized embeddings used as extra negatives."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries = np.zeros((0, 0))
        self.source = ""
        self.refreshed_at_epoch = -1

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    def refresh(self, embeddings: np.ndarray, source: str = "",
                epoch: int = -1) -> None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2:
            raise ContractError("queue entries must be a (n, d) matrix")
        if len(embeddings) > self.capacity:
            raise ContractError(
                f"{len(embeddings)} entries exceed queue capacity {self.capacity}")
        _check_unit_rows("queue entries", embeddings)
        self._entries = embeddings.copy()
        self.source = source
        self.refreshed_at_epoch = epoch

    def sample(self, k: int, seed: int) -> np.ndarray:
        return queue_sample(self, k, seed)


def queue_sample(queue: NegativeQueue, k: int, seed: int) -> np.ndarray:
    """Uniform sample of k queue entries without replacement; seeded."""
    if k < 0:
        raise ContractError("sample size must be >= 0")
    if k > len(queue):
        raise ContractError(f"cannot sample {k} of {len(queue)} queue entries")
    if k == 0:
        d = queue.entries.shape[1] if queue.entries.ndim == 2 else 0
        return np.zeros((0, d))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(queue), size=k, replace=False)
    return queue.entries[idx]


def contrastive_loss(p_s: np.ndarray, p_o: np.ndarray, negatives: np.ndarray,
                     tau: float):
    """Loss and exact gradients.

    L = -sum_i log[ exp(sim(p_s_i, p_o_i)/tau) / alpha_i ] where alpha_i sums
    exp(sim(p_s_i, p_o_j)/tau) over the batch plus exp(sim(p_s_i, q_k)/tau)
    over the sampled negatives.

    Returns (loss, grads) with grads for 'p_s', 'p_o', 'negatives' and 'tau'.
    """
    p_s = np.asarray(p_s, dtype=np.float64)
    p_o = np.asarray(p_o, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.size == 0:
        negatives = negatives.reshape(0, p_s.shape[1])
    if p_s.shape != p_o.shape or p_s.ndim != 2:
        raise ContractError("p_s and p_o must be matching (B, d) matrices")
    if negatives.shape[1] != p_s.shape[1]:
        raise ContractError("negatives dimension mismatch")
    if not np.isfinite(tau) or tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    _check_unit_rows("p_s", p_s)
    _check_unit_rows("p_o", p_o)
    _check_unit_rows("negatives", negatives)

    batch = p_s.shape[0]
    sims = np.concatenate([p_s @ p_o.T, p_s @ negatives.T], axis=1)  # (B, B+K)
    logits = sims / tau
    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    denom = exp.sum(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(denom[:, 0])
    pos = np.diag(logits[:, :batch])
    loss = float(np.sum(lse - pos))

    weights = exp / denom                                  # softmax rows
    d_logits = weights.copy()
    d_logits[np.arange(batch), np.arange(batch)] -= 1.0
    d_sims = d_logits / tau
    d_ps = d_sims[:, :batch] @ p_o + d_sims[:, batch:] @ negatives
    d_po = d_sims[:, :batch].T @ p_s
    d_neg = d_sims[:, batch:].T @ p_s
    # dL/dtau: the positive term contributes +s_ii/tau^2, the log-sum-exp
    # contributes -sum_j w_ij s_ij / tau^2.
    d_tau = float(np.sum(np.diag(sims[:, :batch])
                         - np.sum(weights * sims, axis=1)) / (tau * tau))
    grads = {"p_s": d_ps, "p_o": d_po, "negatives": d_neg, "tau": d_tau}
    return loss, grads
