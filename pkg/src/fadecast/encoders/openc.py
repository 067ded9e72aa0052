"""Gated multi-head attention encoder for operational cycle windows.

Per time step, a softmax gate (conditioned on the channels plus the static
context) weights per-channel linear lifts; a multi-head self-attention block
mixes the gated vectors over time; mean pooling plus the static context feeds
a dense embedding head.  Static covariates are a learned per-chemistry
embedding and the z-scored initial capacity.

Padded steps never enter the computation: windows are trimmed to their true
length before encoding, so mask invariance is exact by construction.  Batched
forward/backward requires equal-length windows for the same reason.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError
from .common import softmax_last, softmax_last_backward, uniform_init

CHANNELS = ("soh", "temp_c", "chg_current_a", "dis_current_a", "voltage_v")
UNKNOWN_CHEMISTRY = "<unk>"


@dataclass
class OperationalWindow:
    """A truncated history of cycle-level features plus static metadata.

    features columns follow CHANNELS; mask marks real (non-padded) steps.
    """

    features: np.ndarray          # (T_padded, len(CHANNELS))
    cycles: np.ndarray            # (T_padded,)
    chemistry: str
    initial_capacity_ah: float
    mask: np.ndarray | None = None
    cell_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.cycles = np.asarray(self.cycles, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] != len(CHANNELS):
            raise ContractError(
                f"features must be (T, {len(CHANNELS)}), got {self.features.shape}")
        if self.mask is None:
            self.mask = np.ones(len(self.features), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if len(self.mask) != len(self.features) or len(self.cycles) != len(self.features):
            raise ContractError("mask/cycles length must match features")
        if int(self.mask.sum()) < 1:
            raise ContractError("window must contain at least one real step")
        soh = self.features[self.mask, 0]
        if np.any(soh <= 0) or np.any(soh > 1.2):
            raise ContractError("SoH values must lie in (0, 1.2]")

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    def trimmed(self) -> tuple[np.ndarray, np.ndarray]:
        """(features, cycles) restricted to real steps."""
        return self.features[self.mask], self.cycles[self.mask]

    def soh(self) -> np.ndarray:
        return self.features[self.mask, 0]

    def padded(self, total_len: int) -> "OperationalWindow":
        """Same window with zero-padding appended up to total_len steps."""
        if total_len < len(self.features):
            raise ContractError("cannot pad below current length")
        extra = total_len - len(self.features)
        return OperationalWindow(
            features=np.vstack([self.features,
                                np.zeros((extra, len(CHANNELS)))]),
            cycles=np.concatenate([self.cycles, np.zeros(extra, dtype=np.int64)]),
            chemistry=self.chemistry,
            initial_capacity_ah=self.initial_capacity_ah,
            mask=np.concatenate([self.mask, np.zeros(extra, dtype=bool)]),
            cell_id=self.cell_id)


@dataclass(frozen=True)
class OpEncoderConfig:
    n_features: int = len(CHANNELS)
    chem_vocab: tuple[str, ...] = (UNKNOWN_CHEMISTRY,)
    chem_dim: int = 4
    attn_dim: int = 64
    n_heads: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        if self.chem_vocab[0] != UNKNOWN_CHEMISTRY:
            raise ConfigError("chem_vocab[0] must be the reserved unknown token")
        if len(set(self.chem_vocab)) != len(self.chem_vocab):
            raise ConfigError("chem_vocab entries must be unique")
        if self.attn_dim % self.n_heads != 0:
            raise ConfigError(
                f"attn_dim {self.attn_dim} not divisible by heads {self.n_heads}")
        if min(self.n_features, self.chem_dim, self.attn_dim, self.n_heads,
               self.embed_dim) < 1:
            raise ConfigError("all dimensions must be >= 1")

    @property
    def static_dim(self) -> int:
        return self.chem_dim + 1

    @property
    def context_dim(self) -> int:
        return self.attn_dim + self.static_dim

    def chem_index(self, chemistry: str) -> int:
        try:
            return self.chem_vocab.index(chemistry)
        except ValueError:
            return 0

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        f, ds = self.n_features, self.static_dim
        da, d = self.attn_dim, self.embed_dim
        return {"op/chem_emb": (len(self.chem_vocab), self.chem_dim),
                "op/gate_w": (f, f + ds), "op/gate_b": (f,),
                "op/lift_w": (f, da), "op/lift_b": (f, da),
                "op/wq": (da, da), "op/wk": (da, da), "op/wv": (da, da),
                "op/wo": (da, da), "op/bo": (da,),
                "op/head_w": (d, self.context_dim), "op/head_b": (d,)}


def init_op_tensors(cfg: OpEncoderConfig,
                    rng: np.random.Generator) -> dict[str, np.ndarray]:
    f, ds, da = cfg.n_features, cfg.static_dim, cfg.attn_dim
    return {
        "op/chem_emb": uniform_init(rng, (len(cfg.chem_vocab), cfg.chem_dim),
                                    fan_in=len(cfg.chem_vocab)),
        "op/gate_w": uniform_init(rng, (f, f + ds), fan_in=f + ds),
        "op/gate_b": np.zeros(f),
        "op/lift_w": uniform_init(rng, (f, da), fan_in=1),
        "op/lift_b": np.zeros((f, da)),
        "op/wq": uniform_init(rng, (da, da), fan_in=da),
        "op/wk": uniform_init(rng, (da, da), fan_in=da),
        "op/wv": uniform_init(rng, (da, da), fan_in=da),
        "op/wo": uniform_init(rng, (da, da), fan_in=da),
        "op/bo": np.zeros(da),
        "op/head_w": uniform_init(rng, (cfg.embed_dim, cfg.context_dim),
                                  fan_in=cfg.context_dim),
        "op/head_b": np.zeros(cfg.embed_dim),
    }


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, da = x.shape
    return x.reshape(b, t, n_heads, da // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def op_forward(cfg: OpEncoderConfig, tensors, x: np.ndarray,
               chem_ids: np.ndarray, ic_z: np.ndarray):
    """Encode an equal-length batch.

    x: (B, T, F) normalized channel values; chem_ids: (B,) vocabulary
    indices; ic_z: (B,) z-scored initial capacities.  Returns (z, cache).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.n_features:
        raise ConfigError(f"batch must be (B, T, {cfg.n_features})")
    if x.shape[1] < 1:
        raise ContractError("empty window")
    b, t, f = x.shape
    chem_ids = np.asarray(chem_ids, dtype=np.int64)
    ic_z = np.asarray(ic_z, dtype=np.float64)

    static = np.concatenate([tensors["op/chem_emb"][chem_ids],
                             ic_z[:, None]], axis=1)          # (B, ds)
    u = np.concatenate([x, np.broadcast_to(static[:, None, :],
                                           (b, t, cfg.static_dim))], axis=2)
    gate_logits = u @ tensors["op/gate_w"].T + tensors["op/gate_b"]
    gates = softmax_last(gate_logits)                          # (B, T, F)
    lifts = x[..., None] * tensors["op/lift_w"][None, None] \
        + tensors["op/lift_b"][None, None]                     # (B, T, F, da)
    v_in = np.einsum("btf,btfd->btd", gates, lifts)            # (B, T, da)

    dk = cfg.attn_dim // cfg.n_heads
    q = _split_heads(v_in @ tensors["op/wq"], cfg.n_heads)
    k = _split_heads(v_in @ tensors["op/wk"], cfg.n_heads)
    v = _split_heads(v_in @ tensors["op/wv"], cfg.n_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dk)       # (B, H, T, T)
    attn = softmax_last(scores)
    heads = _merge_heads(attn @ v)                             # (B, T, da)
    mixed = heads @ tensors["op/wo"] + tensors["op/bo"]

    pooled = mixed.mean(axis=1)                                # (B, da)
    context = np.concatenate([pooled, static], axis=1)         # (B, dh)
    z = context @ tensors["op/head_w"].T + tensors["op/head_b"]

    cache = {"x": x, "chem_ids": chem_ids, "u": u, "gates": gates,
             "v_in": v_in, "q": q, "k": k, "v": v, "attn": attn,
             "heads": heads, "context": context}
    return z, cache


def op_backward(cfg: OpEncoderConfig, tensors, cache, dz: np.ndarray):
    """Parameter gradients for a cached forward pass; returns grads dict."""
    x = cache["x"]
    b, t, f = x.shape
    dk = cfg.attn_dim // cfg.n_heads
    grads = {}

    context = cache["context"]
    grads["op/head_w"] = dz.T @ context
    grads["op/head_b"] = dz.sum(axis=0)
    d_context = dz @ tensors["op/head_w"]
    d_pooled = d_context[:, :cfg.attn_dim]
    d_static = d_context[:, cfg.attn_dim:].copy()

    d_mixed = np.repeat(d_pooled[:, None, :], t, axis=1) / t
    heads = cache["heads"]
    grads["op/wo"] = np.einsum("bti,btj->ij", heads, d_mixed)
    grads["op/bo"] = d_mixed.sum(axis=(0, 1))
    d_heads = _split_heads(d_mixed @ tensors["op/wo"].T, cfg.n_heads)

    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    d_attn = d_heads @ v.transpose(0, 1, 3, 2)
    d_v = attn.transpose(0, 1, 3, 2) @ d_heads
    d_scores = softmax_last_backward(attn, d_attn) / math.sqrt(dk)
    d_q = d_scores @ k
    d_k = d_scores.transpose(0, 1, 3, 2) @ q

    v_in = cache["v_in"]
    d_q, d_k, d_v = (_merge_heads(g) for g in (d_q, d_k, d_v))
    grads["op/wq"] = np.einsum("bti,btj->ij", v_in, d_q)
    grads["op/wk"] = np.einsum("bti,btj->ij", v_in, d_k)
    grads["op/wv"] = np.einsum("bti,btj->ij", v_in, d_v)
    d_v_in = d_q @ tensors["op/wq"].T + d_k @ tensors["op/wk"].T \
        + d_v @ tensors["op/wv"].T

    gates = cache["gates"]
    lifts = x[..., None] * tensors["op/lift_w"][None, None] \
        + tensors["op/lift_b"][None, None]
    d_gates = np.einsum("btd,btfd->btf", d_v_in, lifts)
    d_lifts = gates[..., None] * d_v_in[:, :, None, :]
    grads["op/lift_w"] = np.einsum("btf,btfd->fd", x, d_lifts)
    grads["op/lift_b"] = d_lifts.sum(axis=(0, 1))
    d_x = np.einsum("btfd,fd->btf", d_lifts, tensors["op/lift_w"])

    d_gate_logits = softmax_last_backward(gates, d_gates)
    grads["op/gate_w"] = np.einsum("btf,btu->fu", d_gate_logits, cache["u"])
    grads["op/gate_b"] = d_gate_logits.sum(axis=(0, 1))
    d_u = d_gate_logits @ tensors["op/gate_w"]
    d_x += d_u[:, :, :f]
    d_static += d_u[:, :, f:].sum(axis=1)

    d_chem = np.zeros_like(tensors["op/chem_emb"])
    np.add.at(d_chem, cache["chem_ids"], d_static[:, :cfg.chem_dim])
    grads["op/chem_emb"] = d_chem
    grads["input"] = d_x
    grads["input_ic"] = d_static[:, cfg.chem_dim]
    return grads
