"""1-D CNN encoder for fixed-length simulated capacity curves.

Strided same-padded convolutions with ReLU, global average pooling over
time, then a linear projection into the shared space.  Convolutions run as
im2col gathers + matmuls; the backward pass mirrors them with scatter-adds,
so every reduction has a fixed order and results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .common import relu, uniform_init


@dataclass(frozen=True)
class SimEncoderConfig:
    """Input modes: "raw" feeds the capacity vector as one channel;
    "centered" subtracts the per-sample mean (capacity curves share a
    dominant mean level that otherwise collapses embedding directions);
    "shape" (default) stacks the centered curve, the per-sample standardized
    fade-rate profile, and a position ramp.  The fade-rate channel makes
    knee timing the dominant variance, and the position channel lets
    global average pooling see where patterns occur at all (pool(conv) is
    otherwise translation-blind)."""

    input_len: int = 256
    layers: tuple[tuple[int, int, int], ...] = ((16, 5, 2), (32, 5, 2), (64, 5, 2))
    embed_dim: int = 64
    input_mode: str = "shape"

    def __post_init__(self):
        if self.input_len < 2:
            raise ConfigError("input_len must be >= 2")
        if self.input_mode not in ("raw", "centered", "shape"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        t = self.input_len
        for i, (ch, kernel, stride) in enumerate(self.layers):
            if ch < 1 or kernel < 1 or stride < 1:
                raise ConfigError(f"layer {i}: bad (channels, kernel, stride)")
            t = (t + 2 * (kernel // 2) - kernel) // stride + 1
            if t < 1:
                raise ConfigError(f"layer {i} would shrink time axis to {t}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")

    @property
    def in_channels(self) -> int:
        return 3 if self.input_mode == "shape" else 1

    def time_lengths(self) -> list[int]:
        out = [self.input_len]
        for ch, kernel, stride in self.layers:
            out.append((out[-1] + 2 * (kernel // 2) - kernel) // stride + 1)
        return out

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = self.in_channels
        for i, (ch, kernel, _) in enumerate(self.layers):
            shapes[f"sim/conv{i}_w"] = (ch, c_in, kernel)
            shapes[f"sim/conv{i}_b"] = (ch,)
            c_in = ch
        shapes["sim/proj_w"] = (self.embed_dim, c_in)
        shapes["sim/proj_b"] = (self.embed_dim,)
        return shapes


def init_sim_tensors(cfg: SimEncoderConfig,
                     rng: np.random.Generator) -> dict[str, np.ndarray]:
    tensors = {}
    c_in = cfg.in_channels
    for i, (ch, kernel, _) in enumerate(cfg.layers):
        tensors[f"sim/conv{i}_w"] = uniform_init(rng, (ch, c_in, kernel),
                                                 fan_in=c_in * kernel)
        tensors[f"sim/conv{i}_b"] = np.zeros(ch)
        c_in = ch
    tensors["sim/proj_w"] = uniform_init(rng, (cfg.embed_dim, c_in), fan_in=c_in)
    tensors["sim/proj_b"] = np.zeros(cfg.embed_dim)
    return tensors


def _col_indices(t_in: int, kernel: int, stride: int) -> np.ndarray:
    pad = kernel // 2
    t_out = (t_in + 2 * pad - kernel) // stride + 1
    return (np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :])


def sim_forward(cfg: SimEncoderConfig, tensors, x: np.ndarray):
    """Encode a (B, input_len) batch; returns (z, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != cfg.input_len:
        raise ConfigError(
            f"input length {x.shape[1]} != configured {cfg.input_len}")
    if cfg.input_mode == "raw":
        act = x[:, None, :]
    elif cfg.input_mode == "centered":
        act = (x - x.mean(axis=1, keepdims=True))[:, None, :]
    else:
        centered = x - x.mean(axis=1, keepdims=True)
        fade = np.gradient(x, axis=1) * cfg.input_len
        fade = (fade - fade.mean(axis=1, keepdims=True)) \
            / (fade.std(axis=1, keepdims=True) + 1e-9)
        pos = np.broadcast_to(np.linspace(-1.0, 1.0, cfg.input_len),
                              x.shape)
        act = np.stack([centered, fade, pos], axis=1)
    cols, pre_relu, acts = [], [], [act]
    for i, (ch, kernel, stride) in enumerate(cfg.layers):
        w = tensors[f"sim/conv{i}_w"]
        b = tensors[f"sim/conv{i}_b"]
        pad = kernel // 2
        padded = np.pad(act, ((0, 0), (0, 0), (pad, pad)))
        idx = _col_indices(act.shape[2], kernel, stride)
        # (B, C_in, T_out, K) -> (B, C_in*K, T_out)
        col = padded[:, :, idx].transpose(0, 1, 3, 2)
        col = col.reshape(col.shape[0], -1, col.shape[3])
        w2 = w.reshape(w.shape[0], -1)
        z = np.matmul(w2, col) + b[None, :, None]
        act = relu(z)
        cols.append(col)
        pre_relu.append(z)
        acts.append(act)
    pooled = act.mean(axis=2)
    z_out = pooled @ tensors["sim/proj_w"].T + tensors["sim/proj_b"]
    cache = {"x": x, "cols": cols, "pre_relu": pre_relu, "acts": acts,
             "pooled": pooled}
    return z_out, cache


def sim_backward(cfg: SimEncoderConfig, tensors, cache, dz: np.ndarray):
    """Parameter gradients for a cached forward pass; returns grads dict."""
    grads = {}
    pooled = cache["pooled"]
    grads["sim/proj_w"] = dz.T @ pooled
    grads["sim/proj_b"] = dz.sum(axis=0)
    d_act = dz @ tensors["sim/proj_w"]
    last = cache["acts"][-1]
    d_act = np.repeat(d_act[:, :, None], last.shape[2], axis=2) / last.shape[2]
    for i in reversed(range(len(cfg.layers))):
        ch, kernel, stride = cfg.layers[i]
        w = tensors[f"sim/conv{i}_w"]
        w2 = w.reshape(w.shape[0], -1)
        z = cache["pre_relu"][i]
        col = cache["cols"][i]
        d_z = d_act * (z > 0)
        grads[f"sim/conv{i}_b"] = d_z.sum(axis=(0, 2))
        grads[f"sim/conv{i}_w"] = np.einsum("bot,bkt->ok", d_z, col).reshape(w.shape)
        d_col = np.einsum("ok,bot->bkt", w2, d_z)
        b_size, _, t_out = d_col.shape
        c_in = cache["acts"][i].shape[1]
        # (B, C_in*K, T_out) -> (B, C_in, T_out, K) for the scatter-add
        d_col = d_col.reshape(b_size, c_in, kernel, t_out).transpose(0, 1, 3, 2)
        pad = kernel // 2
        t_in = cache["acts"][i].shape[2]
        d_padded = np.zeros((b_size, c_in, t_in + 2 * pad))
        idx = _col_indices(t_in, kernel, stride)
        np.add.at(d_padded, (slice(None), slice(None), idx), d_col)
        d_act = d_padded[:, :, pad:pad + t_in]
    # gradient wrt the preprocessed channel stack (inputs are data, never
    # trained through, so the preprocessing adjoint is not applied)
    grads["input"] = d_act
    return grads
