"""Generate, resample, persist and index the simulated-curve retrieval bank.

Each entry stores a fixed-length capacity vector resampled onto a uniform
grid over the curve's own [0, t_end], so entries carry shape; t_end stays as
metadata for rescaling forecasts back to absolute cycles.

File format (.acb): magic "FCBK", u32 format version, u64 header length,
UTF-8 JSON header (n_grid, count, bounds, seed, step, time_cap, dropped),
then per entry: u64 id, 5 x f64 params, f64 t_end, n_grid x f64 capacity.
All little-endian, 64-bit floats.  A lossless JSON text export mirrors the
same content (floats survive exactly via shortest round-trip repr).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .degradation import (
    CAPACITY_FLOOR,
    DEFAULT_STEP,
    DEFAULT_TIME_CAP,
    DegradationParams,
    SimCurve,
    simulate,
)
from .errors import (
    BankGenerationError,
    ContractError,
    CorruptBankError,
    EmptyBankError,
    FadecastError,
    IntegrationDivergedError,
)
from .fitting import DEFAULT_BOUNDS, ParamBounds

DEFAULT_N_GRID = 256
_MAGIC = b"FCBK"
_FORMAT_VERSION = 1


def resample_curve(t: np.ndarray, values: np.ndarray, n_grid: int) -> np.ndarray:
    """Linear resample onto n_grid uniform points over [t[0], t[-1]]."""
    grid = np.linspace(float(t[0]), float(t[-1]), n_grid)
    return np.interp(grid, t, values)


@dataclass
class BankEntry:
    id: int
    params: DegradationParams
    t_end: float
    capacity: np.ndarray  # length n_grid, capacity[0] == 1

    @property
    def reached_floor(self) -> bool:
        return bool(self.capacity[-1] < CAPACITY_FLOOR)

    def shape_at(self, u) -> np.ndarray:
        """Capacity at normalized time u in [0, 1] (linear interp)."""
        grid = np.linspace(0.0, 1.0, len(self.capacity))
        return np.interp(u, grid, self.capacity)


@dataclass
class CurveBank:
    entries: list[BankEntry]
    n_grid: int
    bounds: ParamBounds
    seed: int
    step: float = DEFAULT_STEP
    time_cap: float = DEFAULT_TIME_CAP
    dropped: int = 0
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _index: dict[int, int] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def capacity_matrix(self) -> np.ndarray:
        """(count, n_grid) matrix of entry capacity vectors, row i = entries[i]."""
        if self._matrix is None:
            self._matrix = np.stack([e.capacity for e in self.entries])
        return self._matrix

    def entry_by_id(self, entry_id: int) -> BankEntry:
        if self._index is None:
            self._index = {e.id: i for i, e in enumerate(self.entries)}
        try:
            return self.entries[self._index[entry_id]]
        except KeyError:
            raise CorruptBankError(f"no bank entry with id {entry_id}") from None

    def provenance(self) -> dict:
        return {"format_version": _FORMAT_VERSION, "n_grid": self.n_grid,
                "count": len(self.entries), "bounds": self.bounds.to_dict(),
                "seed": self.seed, "step": self.step, "time_cap": self.time_cap,
                "dropped": self.dropped}


def _resampled_entry(entry_id: int, params: DegradationParams,
                     curve: SimCurve, n_grid: int) -> BankEntry:
    capacity = resample_curve(curve.t, curve.capacity, n_grid)
    return BankEntry(id=entry_id, params=params, t_end=curve.t_end,
                     capacity=capacity)


def generate_bank(bounds: ParamBounds = DEFAULT_BOUNDS, count: int = 1000,
                  seed: int = 0, n_grid: int = DEFAULT_N_GRID,
                  step: float = DEFAULT_STEP,
                  time_cap: float = DEFAULT_TIME_CAP) -> CurveBank:
    """Simulate `count` parameter draws sampled uniformly within bounds.

    Deterministic given (bounds, count, seed).  Entries whose simulation
    diverges are dropped and counted; more than 10% drops raises
    BankGenerationError.
    """
    if count < 1:
        raise ContractError("count must be >= 1")
    if n_grid < 2:
        raise ContractError("n_grid must be >= 2")
    rng = np.random.default_rng(seed)
    draws = bounds.sample(rng, count)
    entries: list[BankEntry] = []
    dropped = 0
    for i in range(count):
        params = DegradationParams.from_array(draws[i])
        try:
            curve = simulate(params, step=step, time_cap=time_cap)
        except IntegrationDivergedError:
            dropped += 1
            continue
        entries.append(_resampled_entry(i, params, curve, n_grid))
    if dropped > 0.1 * count:
        raise BankGenerationError(
            f"{dropped}/{count} sampled parameter sets failed to simulate")
    return CurveBank(entries=entries, n_grid=n_grid, bounds=bounds, seed=seed,
                     step=step, time_cap=time_cap, dropped=dropped)


def nearest_by_curve(bank: CurveBank, query: np.ndarray) -> BankEntry:
    """Entry minimizing mean squared difference to `query`; ties -> lowest id."""
    if len(bank) == 0:
        raise EmptyBankError("nearest_by_curve on empty bank")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (bank.n_grid,):
        raise ContractError(
            f"query length {query.shape} does not match n_grid {bank.n_grid}")
    mat = bank.capacity_matrix()
    diff = mat - query[None, :]
    mse = np.mean(diff * diff, axis=1)
    ids = np.array([e.id for e in bank.entries])
    best = np.lexsort((ids, mse))[0]
    return bank.entries[best]


# --- persistence ------------------------------------------------------------

def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via temp file + rename so readers never see partial content."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def bank_to_bytes(bank: CurveBank) -> bytes:
    header = json.dumps(bank.provenance(), sort_keys=True).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", _FORMAT_VERSION),
             struct.pack("<Q", len(header)), header]
    for e in bank.entries:
        parts.append(struct.pack("<Q", e.id))
        parts.append(e.params.as_array().astype("<f8").tobytes())
        parts.append(struct.pack("<d", e.t_end))
        parts.append(np.ascontiguousarray(e.capacity, dtype="<f8").tobytes())
    return b"".join(parts)


def bank_from_bytes(raw: bytes) -> CurveBank:
    if raw[:4] != _MAGIC:
        raise CorruptBankError("not a bank file (bad magic)")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != _FORMAT_VERSION:
        raise CorruptBankError(f"unsupported bank format version {version}")
    hlen = struct.unpack_from("<Q", raw, 8)[0]
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    n_grid = int(header["n_grid"])
    count = int(header["count"])
    offset = 16 + hlen
    record = 8 + 5 * 8 + 8 + n_grid * 8
    if len(raw) != offset + count * record:
        raise CorruptBankError("bank file truncated or padded")
    entries = []
    for _ in range(count):
        eid = struct.unpack_from("<Q", raw, offset)[0]
        params = np.frombuffer(raw, dtype="<f8", count=5, offset=offset + 8)
        t_end = struct.unpack_from("<d", raw, offset + 48)[0]
        capacity = np.frombuffer(raw, dtype="<f8", count=n_grid,
                                 offset=offset + 56).copy()
        entries.append(BankEntry(id=int(eid),
                                 params=DegradationParams.from_array(params),
                                 t_end=float(t_end), capacity=capacity))
        offset += record
    return CurveBank(entries=entries, n_grid=n_grid,
                     bounds=ParamBounds.from_dict(header["bounds"]),
                     seed=int(header["seed"]), step=float(header["step"]),
                     time_cap=float(header["time_cap"]),
                     dropped=int(header["dropped"]))


def write_bank(bank: CurveBank, path: str) -> None:
    atomic_write_bytes(path, bank_to_bytes(bank))


def read_bank(path: str) -> CurveBank:
    try:
        with open(path, "rb") as fh:
            return bank_from_bytes(fh.read())
    except OSError as exc:
        raise FadecastError(f"cannot read bank file {path}: {exc}") from exc


def bank_to_json(bank: CurveBank) -> str:
    """Lossless text export; floats round-trip exactly through repr."""
    doc = bank.provenance()
    doc["entries"] = [
        {"id": e.id, "params": list(e.params.as_array()),
         "t_end": e.t_end, "capacity": e.capacity.tolist()}
        for e in bank.entries
    ]
    return json.dumps(doc, sort_keys=True, indent=1)


def bank_from_json(text: str) -> CurveBank:
    doc = json.loads(text)
    entries = [BankEntry(id=int(d["id"]),
                         params=DegradationParams.from_array(d["params"]),
                         t_end=float(d["t_end"]),
                         capacity=np.array(d["capacity"], dtype=np.float64))
               for d in doc["entries"]]
    return CurveBank(entries=entries, n_grid=int(doc["n_grid"]),
                     bounds=ParamBounds.from_dict(doc["bounds"]),
                     seed=int(doc["seed"]), step=float(doc["step"]),
                     time_cap=float(doc["time_cap"]),
                     dropped=int(doc["dropped"]))
