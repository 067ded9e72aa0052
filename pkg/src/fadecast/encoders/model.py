"""Dual-encoder model container and its checkpoint format.

A Model bundles both encoder configs, every trainable tensor (including the
raw log-temperature), and the feature-normalization statistics, so a single
checkpoint file is enough to reproduce inference exactly.

Checkpoint format (.fck): magic "FCCK", u32 format version, u64 header
length, UTF-8 JSON header (configs, normalization stats, ordered tensor
index with shapes), then the tensors' float64 little-endian bytes in index
order.  Round-trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, FadecastError
from .common import Embedding, Weights, normalize
from .openc import (
    CHANNELS,
    OpEncoderConfig,
    OperationalWindow,
    init_op_tensors,
    op_backward,
    op_forward,
)
from .simenc import SimEncoderConfig, init_sim_tensors, sim_backward, sim_forward

_MAGIC = b"FCCK"
_FORMAT_VERSION = 1
DEFAULT_TAU_INIT = 0.07


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics; SoH stays raw (slot pinned to 0/1)."""

    channel_mu: np.ndarray
    channel_sd: np.ndarray
    ic_mu: float = 0.0
    ic_sd: float = 1.0

    def __post_init__(self):
        mu = np.asarray(self.channel_mu, dtype=np.float64).copy()
        sd = np.asarray(self.channel_sd, dtype=np.float64).copy()
        if mu.shape != (len(CHANNELS),) or sd.shape != (len(CHANNELS),):
            raise ConfigError(f"stats must have {len(CHANNELS)} channels")
        mu[0] = 0.0
        sd[0] = 1.0
        if np.any(sd <= 0) or self.ic_sd <= 0:
            raise ConfigError("normalization scales must be positive")
        object.__setattr__(self, "channel_mu", mu)
        object.__setattr__(self, "channel_sd", sd)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(channel_mu=np.zeros(len(CHANNELS)),
                   channel_sd=np.ones(len(CHANNELS)))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.channel_mu) / self.channel_sd

    def apply_ic(self, ic: float) -> float:
        return (ic - self.ic_mu) / self.ic_sd

    def to_dict(self) -> dict:
        return {"channel_mu": self.channel_mu.tolist(),
                "channel_sd": self.channel_sd.tolist(),
                "ic_mu": self.ic_mu, "ic_sd": self.ic_sd}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(channel_mu=np.array(d["channel_mu"]),
                   channel_sd=np.array(d["channel_sd"]),
                   ic_mu=float(d["ic_mu"]), ic_sd=float(d["ic_sd"]))


class Model:
    """Both encoders plus temperature and normalization stats."""

    def __init__(self, sim_cfg: SimEncoderConfig, op_cfg: OpEncoderConfig,
                 weights: Weights, norm: NormStats):
        if sim_cfg.embed_dim != op_cfg.embed_dim:
            raise ConfigError("encoders must share the embedding dimension")
        self.sim_cfg = sim_cfg
        self.op_cfg = op_cfg
        self.weights = weights
        self.norm = norm

    @classmethod
    def build(cls, sim_cfg: SimEncoderConfig, op_cfg: OpEncoderConfig,
              seed: int = 0, tau_init: float = DEFAULT_TAU_INIT,
              norm: NormStats | None = None) -> "Model":
        """Seeded initialization; weights uniform(+-1/sqrt(fan_in))."""
        if tau_init <= 0:
            raise ConfigError("tau_init must be positive")
        ss = np.random.SeedSequence(seed)
        rng_sim, rng_op = (np.random.default_rng(s) for s in ss.spawn(2))
        tensors = init_sim_tensors(sim_cfg, rng_sim)
        tensors.update(init_op_tensors(op_cfg, rng_op))
        tensors["theta_tau"] = np.array(math.log(tau_init))
        return cls(sim_cfg, op_cfg, Weights(tensors),
                   norm if norm is not None else NormStats.identity())

    @property
    def embed_dim(self) -> int:
        return self.sim_cfg.embed_dim

    @property
    def theta_tau(self) -> float:
        return float(self.weights["theta_tau"])

    @property
    def tau(self) -> float:
        return math.exp(self.theta_tau)

    # --- forward/backward ---------------------------------------------------

    def encode_sim_batch(self, curves: np.ndarray):
        z, cache = sim_forward(self.sim_cfg, self.weights, curves)
        cache["version"] = self.weights.version
        return z, cache

    def window_arrays(self, windows: list[OperationalWindow]):
        """Trim, normalize and stack equal-length windows into batch arrays."""
        if not windows:
            raise ConfigError("empty window batch")
        trimmed = [w.trimmed()[0] for w in windows]
        lengths = {len(t) for t in trimmed}
        if len(lengths) != 1:
            raise ConfigError(f"batch mixes window lengths {sorted(lengths)}")
        x = np.stack([self.norm.apply(t) for t in trimmed])
        chem_ids = np.array([self.op_cfg.chem_index(w.chemistry)
                             for w in windows], dtype=np.int64)
        ic_z = np.array([self.norm.apply_ic(w.initial_capacity_ah)
                         for w in windows])
        return x, chem_ids, ic_z

    def encode_op_batch(self, windows: list[OperationalWindow]):
        x, chem_ids, ic_z = self.window_arrays(windows)
        z, cache = op_forward(self.op_cfg, self.weights, x, chem_ids, ic_z)
        cache["version"] = self.weights.version
        return z, cache

    def backward(self, sim_cache, d_sim: np.ndarray, op_cache,
                 d_op: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for every encoder tensor given embedding gradients."""
        self.weights.check_fresh(sim_cache["version"])
        self.weights.check_fresh(op_cache["version"])
        grads = sim_backward(self.sim_cfg, self.weights, sim_cache, d_sim)
        grads.update(op_backward(self.op_cfg, self.weights, op_cache, d_op))
        grads.pop("input", None)
        grads.pop("input_ic", None)
        return grads

    # --- single-item conveniences --------------------------------------------

    def encode_sim(self, curve: np.ndarray) -> Embedding:
        z, _ = self.encode_sim_batch(np.asarray(curve, dtype=np.float64))
        return Embedding(values=z[0])

    def encode_op(self, window: OperationalWindow) -> Embedding:
        z, _ = self.encode_op_batch([window])
        return Embedding(values=z[0])

    def encode_sim_normalized(self, curves: np.ndarray) -> np.ndarray:
        z, _ = self.encode_sim_batch(curves)
        return np.stack([normalize(Embedding(row)).values for row in z])

    # --- persistence ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        names = sorted(self.weights.names())
        header = {
            "format_version": _FORMAT_VERSION,
            "sim_cfg": {"input_len": self.sim_cfg.input_len,
                        "layers": [list(l) for l in self.sim_cfg.layers],
                        "embed_dim": self.sim_cfg.embed_dim,
                        "input_mode": self.sim_cfg.input_mode},
            "op_cfg": {"n_features": self.op_cfg.n_features,
                       "chem_vocab": list(self.op_cfg.chem_vocab),
                       "chem_dim": self.op_cfg.chem_dim,
                       "attn_dim": self.op_cfg.attn_dim,
                       "n_heads": self.op_cfg.n_heads,
                       "embed_dim": self.op_cfg.embed_dim},
            "norm": self.norm.to_dict(),
            "tensors": [[n, list(self.weights[n].shape)] for n in names],
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(self.weights[n],
                                             dtype="<f8").tobytes()
                        for n in names)
        return b"".join([_MAGIC, struct.pack("<I", _FORMAT_VERSION),
                         struct.pack("<Q", len(head)), head, blob])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Model":
        if raw[:4] != _MAGIC:
            raise FadecastError("not a checkpoint file (bad magic)")
        version = struct.unpack_from("<I", raw, 4)[0]
        if version != _FORMAT_VERSION:
            raise FadecastError(f"unsupported checkpoint version {version}")
        hlen = struct.unpack_from("<Q", raw, 8)[0]
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        sim_cfg = SimEncoderConfig(
            input_len=header["sim_cfg"]["input_len"],
            layers=tuple(tuple(l) for l in header["sim_cfg"]["layers"]),
            embed_dim=header["sim_cfg"]["embed_dim"],
            input_mode=header["sim_cfg"]["input_mode"])
        op_cfg = OpEncoderConfig(
            n_features=header["op_cfg"]["n_features"],
            chem_vocab=tuple(header["op_cfg"]["chem_vocab"]),
            chem_dim=header["op_cfg"]["chem_dim"],
            attn_dim=header["op_cfg"]["attn_dim"],
            n_heads=header["op_cfg"]["n_heads"],
            embed_dim=header["op_cfg"]["embed_dim"])
        tensors = {}
        offset = 16 + hlen
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            tensors[name] = arr.reshape(shape).copy()
            offset += count * 8
        if offset != len(raw):
            raise FadecastError("checkpoint file truncated or padded")
        return cls(sim_cfg, op_cfg, Weights(tensors),
                   NormStats.from_dict(header["norm"]))

    def save(self, path: str) -> None:
        from ..bank import atomic_write_bytes
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "Model":
        try:
            with open(path, "rb") as fh:
                return cls.from_bytes(fh.read())
        except OSError as exc:
            raise FadecastError(f"cannot read checkpoint {path}: {exc}") from exc

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
