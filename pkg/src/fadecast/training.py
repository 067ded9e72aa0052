"""Training loop: Adam over both encoders plus the log-temperature.

Batches group windows of equal length (window lengths come from a small
fixed set), which keeps attention unpadded and means a cell's different-
length windows never share a batch, so the in-batch negatives of a row are
never that row's own positive.

The negative queue holds sim-encoder embeddings of a seeded subset of bank
curves that are nobody's positive, re-embedded with the current weights at
every epoch boundary; `negatives_source="windows"` switches the queue to
held-out operational-window embeddings instead.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .bank import CurveBank
from .contrastive import NegativeQueue, contrastive_loss
from .encoders import (
    CHANNELS,
    Model,
    NormStats,
    OperationalWindow,
    Weights,
    normalize_rows,
    normalize_rows_backward,
)
from .errors import ContractError

PAPER_LEARNING_RATE = 1e-5  # reference value; desk-scale default below
PAPER_QUEUE_DRAW = 2048


class PositivePair(Protocol):
    window: OperationalWindow
    positive_id: int


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    queue_draw: int = 256          # negatives sampled per batch (K)
    queue_size: int = 512          # stored queue entries (M)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 60
    patience: int = 5
    seed: int = 0
    tau_init: float = 0.07
    negatives_source: str = "bank"  # "bank" | "windows"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ContractError("learning rate must be >= 0")
        if self.negatives_source not in ("bank", "windows"):
            raise ContractError("negatives_source must be 'bank' or 'windows'")
        if self.queue_draw < 0 or self.queue_size < 1:
            raise ContractError("queue sizes must be nonnegative/positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    tau: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    diverged: bool = False
    stopped_early: bool = False


class Adam:
    """Single optimizer instance over the union of named tensors."""

    def __init__(self, weights: Weights, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.weights = weights
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.tensors.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = np.asarray(grads[name], dtype=np.float64)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            self.weights.tensors[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.weights.bump()


def compute_norm_stats(windows: Sequence[OperationalWindow]) -> NormStats:
    """Z-score statistics from the training split; SoH stays raw."""
    if not windows:
        raise ContractError("cannot compute stats from zero windows")
    rows = np.concatenate([w.trimmed()[0] for w in windows], axis=0)
    mu = rows.mean(axis=0)
    sd = rows.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    ics = np.array([w.initial_capacity_ah for w in windows])
    ic_sd = float(ics.std())
    return NormStats(channel_mu=mu, channel_sd=sd, ic_mu=float(ics.mean()),
                     ic_sd=ic_sd if ic_sd >= 1e-8 else 1.0)


def chem_vocab_from_windows(windows: Sequence[OperationalWindow]) -> tuple[str, ...]:
    from .encoders import UNKNOWN_CHEMISTRY
    seen = sorted({w.chemistry for w in windows})
    return (UNKNOWN_CHEMISTRY, *[c for c in seen if c != UNKNOWN_CHEMISTRY])


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _length_batches(pairs: Sequence[PositivePair], batch_size: int,
                    rng: np.random.Generator) -> list[list[int]]:
    """Indices grouped by window length, shuffled within groups."""
    by_len: dict[int, list[int]] = {}
    for i, pair in enumerate(pairs):
        by_len.setdefault(pair.window.length, []).append(i)
    batches = []
    for length in sorted(by_len):
        idx = np.array(by_len[length])
        rng.shuffle(idx)
        for start in range(0, len(idx), batch_size):
            batches.append(list(idx[start:start + batch_size]))
    return batches


def _batch_loss(model: Model, bank: CurveBank, pairs: Sequence[PositivePair],
                batch: list[int], negatives: np.ndarray):
    """Forward both encoders for one batch; returns loss pieces for backward.

    Rows anchor at the operational embeddings and contrast the in-batch
    simulated embeddings plus the queue: with bank-curve negatives this is
    the retrieval direction (which simulated curve matches this window), so
    the window encoder receives bank-wide discrimination gradient.
    """
    sim_in = np.stack([bank.entry_by_id(pairs[i].positive_id).capacity
                       for i in batch])
    zs, cache_s = model.encode_sim_batch(sim_in)
    zo, cache_o = model.encode_op_batch([pairs[i].window for i in batch])
    ps = normalize_rows(zs)
    po = normalize_rows(zo)
    loss, raw = contrastive_loss(po, ps, negatives, model.tau)
    lgrads = {"p_s": raw["p_o"], "p_o": raw["p_s"],
              "negatives": raw["negatives"], "tau": raw["tau"]}
    return loss, (zs, zo, ps, po, cache_s, cache_o, lgrads)


def _queue_subset(bank: CurveBank, pairs_train, pairs_val, size: int,
                  rng: np.random.Generator) -> list[int]:
    """Bank entry ids for the queue: never anybody's positive."""
    positives = {p.positive_id for p in pairs_train} | \
        {p.positive_id for p in pairs_val}
    eligible = [e.id for e in bank.entries if e.id not in positives]
    if not eligible:
        raise ContractError("no bank entries left for the negative queue")
    if len(eligible) <= size:
        return eligible
    idx = rng.choice(len(eligible), size=size, replace=False)
    return [eligible[i] for i in sorted(idx)]


def _refresh_queue(queue: NegativeQueue, model: Model, bank: CurveBank,
                   queue_ids: list[int], val_pairs, source: str,
                   epoch: int) -> None:
    if source == "bank":
        curves = np.stack([bank.entry_by_id(i).capacity for i in queue_ids])
        emb = model.encode_sim_normalized(curves)
    else:
        groups: dict[int, list[OperationalWindow]] = {}
        for p in val_pairs:
            groups.setdefault(p.window.length, []).append(p.window)
        chunks = []
        for length in sorted(groups):
            z, _ = model.encode_op_batch(groups[length])
            chunks.append(normalize_rows(z))
        emb = np.concatenate(chunks, axis=0)
    queue.refresh(emb, source=source, epoch=epoch)


def _eval_loss(model: Model, bank: CurveBank, pairs, queue: NegativeQueue,
               k: int, seed: int, batch_size: int) -> float:
    if not pairs:
        return float("nan")
    total, rows = 0.0, 0
    rng = np.random.default_rng(seed)
    batches = _length_batches(pairs, batch_size, rng)
    for step, batch in enumerate(batches):
        negatives = queue.sample(min(k, len(queue)), _derived_seed(seed, step))
        loss, _ = _batch_loss(model, bank, pairs, batch, negatives)
        total += loss
        rows += len(batch)
    return total / rows


def train(pairs_train: Sequence[PositivePair], pairs_val: Sequence[PositivePair],
          bank: CurveBank, config: TrainConfig, model: Model | None = None,
          sim_cfg=None, op_cfg=None) -> TrainResult:
    """Run Algorithm-style epochs; returns the best-validation checkpoint.

    When `model` is None one is built from the given (or default) encoder
    configs, with the chemistry vocabulary and normalization statistics
    derived from the training split.
    """
    if not pairs_train:
        raise ContractError("training set is empty")
    from .encoders import OpEncoderConfig, SimEncoderConfig

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_seed = int(seeds[0].generate_state(1)[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    queue_rng = np.random.default_rng(seeds[2])

    if model is None:
        train_windows = [p.window for p in pairs_train]
        norm = compute_norm_stats(train_windows)
        vocab = chem_vocab_from_windows(train_windows)
        sim_cfg = sim_cfg or SimEncoderConfig(input_len=bank.n_grid)
        if op_cfg is None:
            op_cfg = OpEncoderConfig(chem_vocab=vocab)
        elif len(op_cfg.chem_vocab) == 1:
            op_cfg = dataclasses.replace(op_cfg, chem_vocab=vocab)
        model = Model.build(sim_cfg, op_cfg, seed=init_seed,
                            tau_init=config.tau_init, norm=norm)
    if model.sim_cfg.input_len != bank.n_grid:
        raise ContractError(
            f"sim encoder expects length {model.sim_cfg.input_len}, "
            f"bank n_grid is {bank.n_grid}")

    queue = NegativeQueue(capacity=config.queue_size)
    queue_ids: list[int] = []
    if config.queue_draw > 0:
        if config.negatives_source == "bank":
            queue_ids = _queue_subset(bank, pairs_train, pairs_val,
                                      config.queue_size, queue_rng)
        elif not pairs_val:
            raise ContractError("negatives_source='windows' needs val pairs")
        _refresh_queue(queue, model, bank, queue_ids, pairs_val,
                       config.negatives_source, epoch=-1)

    adam = Adam(model.weights, lr=config.learning_rate, beta1=config.beta1,
                beta2=config.beta2, eps=config.eps)

    best_weights = model.weights.copy()
    last_good = model.weights.copy()
    best_val = math.inf
    best_epoch = -1
    history: list[EpochStats] = []
    diverged = False
    stopped_early = False
    epochs_run = 0

    # One fixed batch partition: the queue refresh already renews negative
    # content every epoch, and a frozen schedule makes the lr=0 no-op (and
    # any fixed-seed rerun) bit-identical epoch over epoch.
    batches = _length_batches(pairs_train, config.batch_size, shuffle_rng)

    for epoch in range(config.max_epochs):
        total, rows = 0.0, 0
        for step, batch in enumerate(batches):
            k = min(config.queue_draw, len(queue))
            negatives = queue.sample(k, _derived_seed(config.seed, step))
            loss, pieces = _batch_loss(model, bank, pairs_train, batch, negatives)
            if not math.isfinite(loss):
                diverged = True
                break
            zs, zo, ps, po, cache_s, cache_o, lgrads = pieces
            d_zs = normalize_rows_backward(zs, ps, lgrads["p_s"])
            d_zo = normalize_rows_backward(zo, po, lgrads["p_o"])
            grads = model.backward(cache_s, d_zs, cache_o, d_zo)
            grads["theta_tau"] = np.array(lgrads["tau"] * model.tau)
            adam.step(grads)
            total += loss
            rows += len(batch)
        if diverged:
            model.weights = last_good
            break
        epochs_run = epoch + 1
        if config.queue_draw > 0:
            _refresh_queue(queue, model, bank, queue_ids, pairs_val,
                           config.negatives_source, epoch=epoch)
        val_loss = _eval_loss(model, bank, pairs_val, queue, config.queue_draw,
                              _derived_seed(config.seed, 1 << 30),
                              config.batch_size)
        train_loss = total / max(rows, 1)
        history.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                  val_loss=val_loss, tau=model.tau))
        last_good = model.weights.copy()
        score = val_loss if not math.isnan(val_loss) else train_loss
        if score < best_val:
            best_val = score
            best_epoch = epoch
            best_weights = model.weights.copy()
        elif epoch - best_epoch >= config.patience:
            stopped_early = True
            break

    model.weights = best_weights
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_val_loss=best_val, epochs_run=epochs_run,
                       diverged=diverged, stopped_early=stopped_early)


def history_csv(history: Sequence[EpochStats]) -> str:
    lines = ["epoch,train_loss,val_loss,tau"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.tau!r}")
    return "\n".join(lines) + "\n"
