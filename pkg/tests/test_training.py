import math
from dataclasses import dataclass

import numpy as np
import pytest

import fadecast.training as training_mod
from fadecast.bank import BankEntry, CurveBank, resample_curve
from fadecast.degradation import DegradationParams, simulate
from fadecast.encoders import (
    OpEncoderConfig,
    OperationalWindow,
    SimEncoderConfig,
    Weights,
)
from fadecast.errors import ContractError
from fadecast.fitting import DEFAULT_BOUNDS
from fadecast.training import (
    Adam,
    TrainConfig,
    compute_norm_stats,
    history_csv,
    train,
)


@dataclass
class Pair:
    window: OperationalWindow
    positive_id: int


TOY_SPECS = [(0.004, 25, 0.0), (0.018, 25, 0.0), (0.010, 25, 0.0),
             (0.002, 4, 0.06), (0.002, 10, 0.06), (0.002, 16, 0.06),
             (0.002, 22, 0.06), (0.006, 4, 0.09), (0.006, 12, 0.09),
             (0.006, 20, 0.09), (0.012, 3, 0.04), (0.012, 9, 0.04),
             (0.012, 15, 0.04), (0.016, 5, 0.08), (0.016, 11, 0.08),
             (0.004, 7, 0.03), (0.004, 14, 0.03), (0.008, 6, 0.05),
             (0.008, 13, 0.05), (0.008, 19, 0.05)]

SIM_CFG = SimEncoderConfig(input_len=64, layers=((8, 5, 2), (16, 5, 2)),
                           embed_dim=16)
OP_CFG = OpEncoderConfig(chem_vocab=("<unk>", "LFP"), chem_dim=2, attn_dim=16,
                         n_heads=2, embed_dim=16)


def toy_problem(n_extra_bank=6):
    """20 well-separated curves with windows whose channels encode params."""
    entries = []
    for i, (k, tp, b0) in enumerate(TOY_SPECS):
        p = DegradationParams(k=k, a0=0.002, b0=b0, c=5.0, t_p=float(tp))
        cv = simulate(p)
        entries.append(BankEntry(id=i, params=p, t_end=cv.t_end,
                                 capacity=resample_curve(cv.t, cv.capacity, 64)))
    rng = np.random.default_rng(99)
    for j in range(n_extra_bank):  # spare non-positive entries for the queue
        p = DegradationParams(k=rng.uniform(0.003, 0.015), a0=0.002,
                              b0=rng.uniform(0.01, 0.09), c=5.0,
                              t_p=rng.uniform(3, 20))
        cv = simulate(p)
        entries.append(BankEntry(id=len(TOY_SPECS) + j, params=p, t_end=cv.t_end,
                                 capacity=resample_curve(cv.t, cv.capacity, 64)))
    bank = CurveBank(entries=entries, n_grid=64, bounds=DEFAULT_BOUNDS, seed=0)
    rng = np.random.default_rng(0)
    pairs = []
    for e in bank.entries[:len(TOY_SPECS)]:
        length = 30
        feats = np.column_stack([
            np.linspace(1.0, 0.97, length),
            np.full(length, 20 + e.params.t_p / 2) + rng.normal(0, .05, length),
            np.full(length, 1 + e.params.b0 * 20) + rng.normal(0, .01, length),
            np.full(length, 1 + e.params.k * 100) + rng.normal(0, .01, length),
            np.full(length, 3.6) + rng.normal(0, .01, length),
        ])
        pairs.append(Pair(window=OperationalWindow(
            features=feats, cycles=np.arange(length), chemistry="LFP",
            initial_capacity_ah=2.0), positive_id=e.id))
    return bank, pairs


def test_toy_memorization_reduces_loss_tenfold():
    bank, pairs = toy_problem()
    cfg = TrainConfig(batch_size=4, queue_draw=0, max_epochs=200,
                      patience=10_000, seed=0, learning_rate=3e-3)
    res = train(pairs, [], bank, cfg, sim_cfg=SIM_CFG, op_cfg=OP_CFG)
    assert res.epochs_run == 200
    first, last = res.history[0].train_loss, res.history[-1].train_loss
    assert last < 0.1 * first


def test_zero_learning_rate_is_a_no_op():
    bank, pairs = toy_problem()
    cfg = TrainConfig(batch_size=4, queue_draw=4, queue_size=6, max_epochs=3,
                      patience=100, seed=1, learning_rate=0.0)
    res = train(pairs[:8], pairs[8:10], bank, cfg, sim_cfg=SIM_CFG,
                op_cfg=OP_CFG)
    losses = [h.train_loss for h in res.history]
    assert losses[0] == losses[1] == losses[2]
    assert all(h.tau == res.history[0].tau for h in res.history)


def test_training_deterministic_given_seed():
    bank, pairs = toy_problem()
    cfg = TrainConfig(batch_size=4, queue_draw=4, queue_size=6, max_epochs=4,
                      patience=100, seed=7, learning_rate=1e-3)
    r1 = train(pairs[:12], pairs[12:16], bank, cfg, sim_cfg=SIM_CFG, op_cfg=OP_CFG)
    r2 = train(pairs[:12], pairs[12:16], bank, cfg, sim_cfg=SIM_CFG, op_cfg=OP_CFG)
    assert [(h.train_loss, h.val_loss, h.tau) for h in r1.history] == \
        [(h.train_loss, h.val_loss, h.tau) for h in r2.history]
    assert r1.model.to_bytes() == r2.model.to_bytes()


def test_nan_loss_aborts_with_last_good_checkpoint(monkeypatch):
    bank, pairs = toy_problem()
    real = training_mod.contrastive_loss
    calls = {"n": 0}

    def poisoned(ps, po, neg, tau):
        calls["n"] += 1
        if calls["n"] > 7:
            loss, grads = real(ps, po, neg, tau)
            return float("nan"), grads
        return real(ps, po, neg, tau)

    monkeypatch.setattr(training_mod, "contrastive_loss", poisoned)
    cfg = TrainConfig(batch_size=4, queue_draw=0, max_epochs=10, patience=100,
                      seed=3, learning_rate=1e-3)
    res = train(pairs[:8], [], bank, cfg, sim_cfg=SIM_CFG, op_cfg=OP_CFG)
    assert res.diverged
    assert res.epochs_run < 10
    # returned model still encodes finite embeddings
    z, _ = res.model.encode_sim_batch(bank.entries[0].capacity)
    assert np.all(np.isfinite(z))


def test_early_stopping_on_patience():
    bank, pairs = toy_problem()
    cfg = TrainConfig(batch_size=4, queue_draw=0, max_epochs=50, patience=2,
                      seed=5, learning_rate=0.0)  # lr 0: val never improves
    res = train(pairs[:8], pairs[8:12], bank, cfg, sim_cfg=SIM_CFG, op_cfg=OP_CFG)
    assert res.stopped_early
    assert res.epochs_run <= 4


def test_adam_single_step_hand_value():
    w = Weights({"p": np.array([1.0, -2.0])})
    adam = Adam(w, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    g = np.array([0.5, -1.5])
    adam.step({"p": g})
    # bias-corrected first step: update = lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.1 * np.sign(g) * np.abs(g) / (np.abs(g) + 1e-8)
    assert np.allclose(w["p"], expected, atol=1e-9)
    assert w.version == 1


def test_compute_norm_stats():
    rng = np.random.default_rng(0)
    wins = []
    for _ in range(4):
        feats = np.column_stack([
            rng.uniform(0.9, 1.0, 10), rng.normal(30, 5, 10),
            rng.normal(1, .2, 10), rng.normal(1, .2, 10), rng.normal(3.6, .1, 10)])
        wins.append(OperationalWindow(features=feats, cycles=np.arange(10),
                                      chemistry="LFP", initial_capacity_ah=2.0))
    stats = compute_norm_stats(wins)
    assert stats.channel_mu[0] == 0.0 and stats.channel_sd[0] == 1.0
    rows = np.concatenate([w.features for w in wins])
    assert stats.channel_mu[1] == pytest.approx(rows[:, 1].mean())
    assert stats.ic_sd == 1.0  # constant ic falls back to unit scale
    with pytest.raises(ContractError):
        compute_norm_stats([])


def test_history_csv_format():
    bank, pairs = toy_problem()
    cfg = TrainConfig(batch_size=4, queue_draw=0, max_epochs=2, patience=100,
                      seed=0, learning_rate=1e-3)
    res = train(pairs[:8], [], bank, cfg, sim_cfg=SIM_CFG, op_cfg=OP_CFG)
    text = history_csv(res.history)
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,train_loss,val_loss,tau"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert math.isfinite(float(first[1]))


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ContractError):
        TrainConfig(negatives_source="other")
