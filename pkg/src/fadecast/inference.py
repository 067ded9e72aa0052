"""Retrieval-based forecasting over a curve bank and trained checkpoint.

A window is encoded, normalized, and ranked against cached normalized bank
embeddings by cosine similarity.  The retrieved dimensionless shape becomes a
cycle-indexed forecast through a least-squares time scale: the horizon N is
chosen so the shape evaluated at cycle/N best matches the observed window.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .bank import BankEntry, CurveBank, atomic_write_bytes, bank_to_bytes, resample_curve
from .degradation import ModeReport, quantify_modes, simulate
from .encoders import Embedding, Model, OperationalWindow, normalize, normalize_rows
from .errors import (
    ConfigError,
    ContractError,
    CorruptBankError,
    EmptyBankError,
    FadecastError,
)

_EMB_MAGIC = b"FCEM"
_EMB_VERSION = 1


@dataclass(frozen=True)
class RankedPath:
    entry_id: int
    score: float
    horizon: int
    cycles: np.ndarray
    capacity: np.ndarray


@dataclass
class Forecast:
    best_id: int
    similarity: float
    top_k: list[tuple[int, float]]
    paths: list[RankedPath]
    window: OperationalWindow

    @property
    def horizon(self) -> int:
        return self.paths[0].horizon

    @property
    def predicted_cycles(self) -> np.ndarray:
        return self.paths[0].cycles

    @property
    def predicted_capacity(self) -> np.ndarray:
        return self.paths[0].capacity


@dataclass(frozen=True)
class UncertaintyBand:
    cycles: np.ndarray
    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    n_rounds: int
    sigma_rel: float


def _check_compat(model: Model, bank: CurveBank) -> None:
    if model.sim_cfg.input_len != bank.n_grid:
        raise ConfigError(
            f"checkpoint expects curves of length {model.sim_cfg.input_len}, "
            f"bank stores {bank.n_grid}")
    if len(bank) == 0:
        raise EmptyBankError("cannot retrieve from an empty bank")


def bank_embeddings(model: Model, bank: CurveBank,
                    batch: int = 256) -> np.ndarray:
    """(count, d) matrix of normalized sim embeddings, bank order."""
    _check_compat(model, bank)
    mat = bank.capacity_matrix()
    chunks = []
    for start in range(0, len(mat), batch):
        z, _ = model.encode_sim_batch(mat[start:start + batch])
        chunks.append(normalize_rows(z))
    return np.concatenate(chunks, axis=0)


def _bank_hash(bank: CurveBank) -> str:
    return hashlib.sha256(bank_to_bytes(bank)).hexdigest()


def load_or_build_embeddings(model: Model, bank: CurveBank,
                             bank_path: str | None = None) -> np.ndarray:
    """Sidecar-cached bank embeddings, invalidated by checkpoint/bank hash."""
    if bank_path is None:
        return bank_embeddings(model, bank)
    sidecar = bank_path + ".emb"
    ck_hash = model.content_hash()
    bk_hash = _bank_hash(bank)
    if os.path.exists(sidecar):
        try:
            with open(sidecar, "rb") as fh:
                raw = fh.read()
            if raw[:4] == _EMB_MAGIC:
                hlen = struct.unpack_from("<Q", raw, 8)[0]
                header = json.loads(raw[16:16 + hlen].decode("utf-8"))
                if header["checkpoint_sha"] == ck_hash \
                        and header["bank_sha"] == bk_hash:
                    emb = np.frombuffer(raw, dtype="<f8",
                                        offset=16 + hlen)
                    return emb.reshape(header["count"], header["d"]).copy()
        except (OSError, ValueError, KeyError):
            pass  # unreadable cache: rebuild below
    emb = bank_embeddings(model, bank)
    header = json.dumps({"checkpoint_sha": ck_hash, "bank_sha": bk_hash,
                         "count": emb.shape[0], "d": emb.shape[1]},
                        sort_keys=True).encode("utf-8")
    payload = b"".join([_EMB_MAGIC, struct.pack("<I", _EMB_VERSION),
                        struct.pack("<Q", len(header)), header,
                        np.ascontiguousarray(emb, dtype="<f8").tobytes()])
    atomic_write_bytes(sidecar, payload)
    return emb


def _window_embedding(model: Model, window: OperationalWindow) -> np.ndarray:
    return normalize(model.encode_op(window)).values


def align_horizon(entry: BankEntry, window: OperationalWindow,
                  max_factor: float = 50.0) -> int:
    """Least-squares cycle horizon N: shape(cycle/N) tracks the observed SoH."""
    feats, cycles = window.trimmed()
    soh = feats[:, 0]
    last = max(int(cycles[-1]), 1)
    lo, hi = float(last + 1), float(last + 1) * max_factor

    def sse(n: float) -> float:
        pred = entry.shape_at(cycles / n)
        d = pred - soh
        return float(d @ d)

    grid = np.geomspace(lo, hi, 256)
    vals = np.array([sse(n) for n in grid])
    i = int(np.argmin(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - inv_phi * (b - a)
    x2 = a + inv_phi * (b - a)
    f1, f2 = sse(x1), sse(x2)
    for _ in range(40):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - inv_phi * (b - a)
            f1 = sse(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + inv_phi * (b - a)
            f2 = sse(x2)
    best = x1 if f1 <= f2 else x2
    return max(int(round(best)), last + 1)


def _materialize(entry: BankEntry, score: float,
                 window: OperationalWindow) -> RankedPath:
    horizon = align_horizon(entry, window)
    cycles = np.arange(horizon + 1)
    capacity = entry.shape_at(cycles / horizon)
    return RankedPath(entry_id=entry.id, score=float(score), horizon=horizon,
                      cycles=cycles, capacity=capacity)


def rank_entries(query: np.ndarray, embeddings: np.ndarray,
                 ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ids and scores sorted by descending score, ties by ascending id."""
    scores = embeddings @ query
    order = np.lexsort((ids, -scores))
    return ids[order], scores[order]


def predict(window: OperationalWindow, bank: CurveBank, model: Model,
            k: int = 5, embeddings: np.ndarray | None = None) -> Forecast:
    """Top-k retrieval forecast for one operational window.

    The best entry's full remaining curve is returned on the asset's cycle
    axis regardless of the window length.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    _check_compat(model, bank)
    if embeddings is None:
        embeddings = bank_embeddings(model, bank)
    if embeddings.shape != (len(bank), model.embed_dim):
        raise ConfigError("embedding matrix does not match bank/model")
    query = _window_embedding(model, window)
    ids = np.array([e.id for e in bank.entries])
    ranked_ids, ranked_scores = rank_entries(query, embeddings, ids)
    k = min(k, len(bank))
    top = [(int(i), float(s)) for i, s in zip(ranked_ids[:k], ranked_scores[:k])]
    paths = [_materialize(bank.entry_by_id(i), s, window) for i, s in top]
    return Forecast(best_id=top[0][0], similarity=top[0][1], top_k=top,
                    paths=paths, window=window)


def top_k_paths(forecast: Forecast, bank: CurveBank) -> list[RankedPath]:
    """Materialized curves for the forecast's ranked ids (CorruptBankError
    if an id is missing from this bank)."""
    return [_materialize(bank.entry_by_id(i), s, forecast.window)
            for i, s in forecast.top_k]


def _perturbed_params(rng: np.random.Generator, params, sigma_rel: float):
    from .degradation import DegradationParams
    k = params.k * math.exp(rng.normal(0.0, sigma_rel))
    a0 = params.a0 * math.exp(rng.normal(0.0, sigma_rel))
    b0 = params.b0 * math.exp(rng.normal(0.0, sigma_rel))
    c = params.c * math.exp(rng.normal(0.0, sigma_rel))
    t_p = max(params.t_p * (1.0 + sigma_rel * rng.normal()), 0.0)
    return DegradationParams(k=k, a0=a0, b0=b0, c=c, t_p=t_p)


def uncertainty(window: OperationalWindow, bank: CurveBank, model: Model,
                n_perturb: int = 200, sigma_rel: float = 0.05, seed: int = 0,
                candidates_per_round: int = 8,
                embeddings: np.ndarray | None = None) -> UncertaintyBand:
    """Perturbation band around the best-matching curve.

    Each round jitters the best match's parameters (multiplicative lognormal;
    additive for the onset time), simulates the candidates, lets retrieval
    pick one against the window embedding, and re-aligns it to the cycle
    axis.  The band is the pointwise 5/50/95 nearest-rank envelope of the
    selected curves, extended flat past each curve's own end of life.
    """
    if n_perturb < 1 or candidates_per_round < 1:
        raise ContractError("n_perturb and candidates_per_round must be >= 1")
    if sigma_rel <= 0:
        raise ContractError("sigma_rel must be positive")
    fc = predict(window, bank, model, k=1, embeddings=embeddings)
    base = bank.entry_by_id(fc.best_id)
    query = _window_embedding(model, window)
    rng = np.random.default_rng(seed)
    selected: list[RankedPath] = []
    for _ in range(n_perturb):
        shapes, entries = [], []
        for _ in range(candidates_per_round):
            params = _perturbed_params(rng, base.params, sigma_rel)
            try:
                curve = simulate(params, step=bank.step, time_cap=bank.time_cap)
            except FadecastError:
                continue
            shapes.append(resample_curve(curve.t, curve.capacity, bank.n_grid))
            entries.append(BankEntry(id=len(entries), params=params,
                                     t_end=curve.t_end, capacity=shapes[-1]))
        if not entries:
            raise FadecastError("all perturbed simulations diverged")
        emb = model.encode_sim_normalized(np.stack(shapes))
        scores = emb @ query
        pick = int(np.argmax(scores))
        selected.append(_materialize(entries[pick], scores[pick], window))
    max_h = max(p.horizon for p in selected)
    grid = np.arange(max_h + 1)
    curves = np.empty((len(selected), len(grid)))
    for i, p in enumerate(selected):
        curves[i, :len(p.capacity)] = p.capacity
        curves[i, len(p.capacity):] = p.capacity[-1]
    curves.sort(axis=0)
    n = len(selected)

    def rank(q: float) -> int:
        return min(max(math.ceil(q * n) - 1, 0), n - 1)

    return UncertaintyBand(cycles=grid, q05=curves[rank(0.05)],
                           q50=curves[rank(0.50)], q95=curves[rank(0.95)],
                           n_rounds=n_perturb, sigma_rel=sigma_rel)


def zero_shot_classify(window: OperationalWindow, candidates: np.ndarray,
                       model: Model) -> list[tuple[int, float]]:
    """Rank externally supplied candidate curves (no bank needed).

    Candidates are (m, input_len) capacity shapes; returns (index, score)
    pairs sorted by descending score, ties broken by input order.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] < 2:
        raise ContractError("need at least two candidate curves")
    if candidates.shape[1] != model.sim_cfg.input_len:
        raise ContractError(
            f"candidate length {candidates.shape[1]} != encoder input "
            f"{model.sim_cfg.input_len}")
    query = _window_embedding(model, window)
    emb = model.encode_sim_normalized(candidates)
    scores = emb @ query
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [(int(i), float(scores[i])) for i in order]


def diagnose(forecast: Forecast, bank: CurveBank, at_cycle: float) -> ModeReport:
    """Degradation-mode split of the best match at an asset cycle."""
    entry = bank.entry_by_id(forecast.best_id)
    t = at_cycle / forecast.horizon * entry.t_end
    curve = simulate(entry.params, step=bank.step, time_cap=bank.time_cap)
    return quantify_modes(curve, t)


def mode_trajectory(forecast: Forecast, bank: CurveBank):
    """(cycles, lam_fade, lli_fade, capacity) along the best match's life."""
    entry = bank.entry_by_id(forecast.best_id)
    curve = simulate(entry.params, step=bank.step, time_cap=bank.time_cap)
    cycles = curve.t / max(curve.t_end, 1e-12) * forecast.horizon
    return (cycles, 1.0 - curve.material, curve.lithium_loss, curve.capacity)
