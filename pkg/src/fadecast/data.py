"""Cycle-data ingestion, training windows and labels, synthetic fleets,
and forecast metrics.

CSV schema (header required), one row per cycle:
cell_id,chemistry,initial_capacity_ah,cycle,capacity_ah,temp_c,chg_current_a,dis_current_a,voltage_v
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .bank import CurveBank, atomic_write_bytes, nearest_by_curve, resample_curve
from .degradation import simulate
from .encoders import CHANNELS, OperationalWindow
from .errors import ContractError, DataValidationError, ParseError
from .fitting import DEFAULT_BOUNDS, fit

log = logging.getLogger(__name__)

CSV_COLUMNS = ("cell_id", "chemistry", "initial_capacity_ah", "cycle",
               "capacity_ah", "temp_c", "chg_current_a", "dis_current_a",
               "voltage_v")

# Observed cycle axes are mapped onto [0, FIT_SPAN] dimensionless units
# before fitting; the model is exactly scale-covariant so only the fitted
# curve's shape matters for labeling.
FIT_SPAN = 20.0


@dataclass
class CellRecord:
    cell_id: str
    chemistry: str
    initial_capacity_ah: float
    cycles: np.ndarray
    capacity_ah: np.ndarray
    temp_c: np.ndarray
    chg_current_a: np.ndarray
    dis_current_a: np.ndarray
    voltage_v: np.ndarray

    def __post_init__(self):
        self.cycles = np.asarray(self.cycles, dtype=np.int64)
        for name in ("capacity_ah", "temp_c", "chg_current_a",
                     "dis_current_a", "voltage_v"):
            setattr(self, name, np.asarray(getattr(self, name),
                                           dtype=np.float64))
        n = len(self.cycles)
        for name in ("capacity_ah", "temp_c", "chg_current_a",
                     "dis_current_a", "voltage_v"):
            if len(getattr(self, name)) != n:
                raise DataValidationError(
                    f"cell {self.cell_id}: column {name} length mismatch")
        if n < 1:
            raise DataValidationError(f"cell {self.cell_id}: no cycles")
        if np.any(np.diff(self.cycles) <= 0):
            raise DataValidationError(
                f"cell {self.cell_id}: cycle indices not strictly increasing")
        if np.any(self.capacity_ah <= 0):
            raise DataValidationError(
                f"cell {self.cell_id}: capacity must be positive")
        if self.initial_capacity_ah <= 0:
            raise DataValidationError(
                f"cell {self.cell_id}: initial capacity must be positive")

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)

    def soh(self) -> np.ndarray:
        return self.capacity_ah / self.initial_capacity_ah

    def window(self, length: int | None = None) -> OperationalWindow:
        """Operational window over the first `length` cycles (None = all)."""
        n = self.n_cycles if length is None else min(length, self.n_cycles)
        feats = np.column_stack([
            self.soh()[:n], self.temp_c[:n], self.chg_current_a[:n],
            self.dis_current_a[:n], self.voltage_v[:n]])
        return OperationalWindow(features=feats, cycles=self.cycles[:n],
                                 chemistry=self.chemistry,
                                 initial_capacity_ah=self.initial_capacity_ah,
                                 cell_id=self.cell_id)


@dataclass(frozen=True)
class LabeledWindow:
    window: OperationalWindow
    positive_id: int
    source_cell_id: str
    length: int


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    mae: float
    mape: float

    def to_csv(self) -> str:
        return f"mse,mae,mape\n{self.mse!r},{self.mae!r},{self.mape!r}\n"


# --- CSV ingestion ----------------------------------------------------------

def records_from_csv_text(text: str) -> list[CellRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV") from None
    if tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise ParseError(
            f"bad header: expected {','.join(CSV_COLUMNS)}")
    buckets: dict[str, dict] = {}
    order: list[str] = []
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ParseError(f"row {row_no}: expected {len(CSV_COLUMNS)} "
                             f"columns, got {len(row)}")
        cell_id, chemistry = row[0], row[1]
        values = {}
        for col, raw in zip(CSV_COLUMNS[2:], row[2:]):
            try:
                values[col] = int(raw) if col == "cycle" else float(raw)
            except ValueError:
                raise ParseError(
                    f"row {row_no}, column {col}: cannot parse {raw!r}") from None
        if cell_id not in buckets:
            buckets[cell_id] = {"chemistry": chemistry,
                                "initial": values["initial_capacity_ah"],
                                "rows": []}
            order.append(cell_id)
        b = buckets[cell_id]
        if chemistry != b["chemistry"]:
            raise DataValidationError(
                f"row {row_no}: cell {cell_id} changes chemistry")
        if values["initial_capacity_ah"] != b["initial"]:
            raise DataValidationError(
                f"row {row_no}: cell {cell_id} changes initial capacity")
        b["rows"].append(values)
    records = []
    for cell_id in order:
        b = buckets[cell_id]
        rows = b["rows"]
        records.append(CellRecord(
            cell_id=cell_id, chemistry=b["chemistry"],
            initial_capacity_ah=b["initial"],
            cycles=[r["cycle"] for r in rows],
            capacity_ah=[r["capacity_ah"] for r in rows],
            temp_c=[r["temp_c"] for r in rows],
            chg_current_a=[r["chg_current_a"] for r in rows],
            dis_current_a=[r["dis_current_a"] for r in rows],
            voltage_v=[r["voltage_v"] for r in rows]))
    return records


def records_to_csv_text(records: list[CellRecord]) -> str:
    out = [",".join(CSV_COLUMNS)]
    for r in records:
        for i in range(r.n_cycles):
            out.append(",".join([
                r.cell_id, r.chemistry, repr(r.initial_capacity_ah),
                str(int(r.cycles[i])), repr(float(r.capacity_ah[i])),
                repr(float(r.temp_c[i])), repr(float(r.chg_current_a[i])),
                repr(float(r.dis_current_a[i])), repr(float(r.voltage_v[i]))]))
    return "\n".join(out) + "\n"


def ingest(path: str) -> list[CellRecord]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataValidationError(f"cannot read {path}: {exc}") from exc
    return records_from_csv_text(text)


def export(records: list[CellRecord], path: str) -> None:
    atomic_write_bytes(path, records_to_csv_text(records).encode("utf-8"))


# --- labels and windows -------------------------------------------------------

@dataclass(frozen=True)
class LabelFitConfig:
    """Fit settings for positive labeling; coarser than criterion-grade fits.

    Bounds are the defaults widened by `bounds_factor` because the rescale of
    a cell's cycle axis onto [0, FIT_SPAN] stretches rate constants by up to
    t_end/FIT_SPAN (~2.5 for slow, time-capped shapes).

    `query` picks what nearest-entry matching runs against: the cell's own
    resampled SoH trajectory ("cell", default - measurement noise is unbiased
    and cancels in the MSE argmin) or the fitted model curve evaluated over
    the observed span ("fitted" - denoises, but the fit absorbs the noise
    realization into a biased shape deviation that can flip near-twin banks).
    """

    step: float = 0.02
    restarts: int = 4
    scan: int = 128
    seed: int = 0
    bounds_factor: float = 2.5
    freeze_c: float | None = None
    query: str = "cell"


DEFAULT_WINDOW_LENGTHS = (50, 100, 200, 400)


def fit_cell_shape(cell: CellRecord, bank: CurveBank,
                   cfg: LabelFitConfig = LabelFitConfig()):
    """Fit the cell's full SoH history; returns (FitResult, fitted shape).

    The fitted shape is the model curve evaluated over the observed span,
    resampled to the bank grid (life-normalized like bank entries).
    """
    soh = cell.soh()
    t_fit = cell.cycles.astype(np.float64)
    t_fit = (t_fit - t_fit[0]) / (t_fit[-1] - t_fit[0]) * FIT_SPAN
    bounds = DEFAULT_BOUNDS.scaled(cfg.bounds_factor)
    result = fit(t_fit, np.clip(soh, 1e-6, 1.2), bounds=bounds,
                 restarts=cfg.restarts, seed=cfg.seed, step=cfg.step,
                 scan=cfg.scan, freeze_c=cfg.freeze_c)
    curve = simulate(result.params, step=cfg.step, time_cap=FIT_SPAN,
                     capacity_floor=None)
    grid = np.linspace(0.0, FIT_SPAN, bank.n_grid)
    shape = np.interp(grid, curve.t, curve.capacity)
    return result, shape


def cell_shape(cell: CellRecord, n_grid: int) -> np.ndarray:
    """The cell's SoH trajectory resampled onto its life-normalized grid."""
    u = np.linspace(0.0, 1.0, n_grid)
    span = cell.cycles[-1] - cell.cycles[0]
    rel = (cell.cycles - cell.cycles[0]) / max(span, 1)
    return np.interp(u, rel, cell.soh())


def make_windows(cell: CellRecord, lengths, bank: CurveBank,
                 fit_config: LabelFitConfig = LabelFitConfig()) -> list[LabeledWindow]:
    """One window per requested length (from cycle 0), all sharing the
    cell's positive: the bank entry nearest to its full-history trajectory.

    The full SoH curve is fitted once (the parametrization doubles as the
    cell's degradation diagnosis); the nearest-entry query uses the raw or
    fitted trajectory per fit_config.query.
    """
    lengths = sorted(set(int(l) for l in lengths))
    if not lengths:
        raise ContractError("lengths must be non-empty")
    usable = [l for l in lengths if l <= cell.n_cycles]
    if not usable:
        log.warning("cell %s: all window lengths exceed lifetime %d",
                    cell.cell_id, cell.n_cycles)
        return []
    _, fitted_shape = fit_cell_shape(cell, bank, fit_config)
    if fit_config.query == "fitted":
        query = fitted_shape
    elif fit_config.query == "cell":
        query = cell_shape(cell, bank.n_grid)
    else:
        raise ContractError(f"unknown label query {fit_config.query!r}")
    positive = nearest_by_curve(bank, query).id
    return [LabeledWindow(window=cell.window(l), positive_id=positive,
                          source_cell_id=cell.cell_id, length=l)
            for l in usable]


# --- synthetic fleet ----------------------------------------------------------

SYNTH_CHEMISTRIES = ("LFP", "NMC")


def _normalized_params(entry, bounds) -> dict[str, float]:
    lo, hi = bounds.as_arrays()
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    vals = (entry.params.as_array() - lo) / span
    vals = np.clip(vals, 0.0, 1.0)
    return dict(zip(("k", "a0", "b0", "c", "t_p"), vals))


def eligible_entry_ids(bank: CurveBank, entry_filter: str = "knee") -> list[int]:
    """Entries a synthetic cell may be generated from.

    "any": every entry; "eol": reached the capacity floor; "knee" (default):
    reached the floor with a visible plating knee - plating loss >= 0.02 at
    the end and onset inside the observed life.  Knee-less floor-terminated
    shapes collapse onto a near-1D family (spread ~1e-2), which makes
    entry-level retrieval ill-posed, so fleets for retrieval work emulate
    knee-dominated fast-charge aging.
    """
    if entry_filter == "any":
        return [e.id for e in bank.entries]
    if entry_filter == "eol":
        return [e.id for e in bank.entries if e.reached_floor]
    if entry_filter != "knee":
        raise ContractError(f"unknown entry filter {entry_filter!r}")
    out = []
    for e in bank.entries:
        if not e.reached_floor:
            continue
        if e.params.t_p > 0.9 * e.t_end:
            continue
        curve = simulate(e.params, step=bank.step, time_cap=bank.time_cap)
        if float(curve.plating_loss[-1]) >= 0.02:
            out.append(e.id)
    return out


def synth_dataset(bank: CurveBank, n_cells: int, noise_sigma: float = 0.002,
                  seed: int = 0, cycle_range: tuple[int, int] = (400, 2000),
                  entry_filter: str = "knee"):
    """Synthesize cells from bank entries with known ground truth.

    Cycle life tracks the entry's dimensionless life (one cycle is a roughly
    fixed dimensionless duration fleet-wide, with small lognormal jitter), so
    harder-aged entries live fewer cycles.  Channels are fixed affine
    functions of the entry's normalized parameters plus per-cycle noise,
    chosen jointly full-rank so the operational window identifies its
    generator: higher plating rate and earlier onset raise the mean charge
    C-rate and lower the temperature; SEI and material-decay rates also warm
    the cell and load the discharge rate; knee sharpness, onset and material
    decay shift the mean voltage.  SoH gets gaussian noise `noise_sigma`.

    Returns (records, truth) where truth maps cell_id to
    {"entry_id", "n_eol"}.
    """
    if n_cells < 1:
        raise ContractError("n_cells must be >= 1")
    eligible = eligible_entry_ids(bank, entry_filter)
    if not eligible:
        raise ContractError(f"no eligible bank entries for filter {entry_filter!r}")
    rng = np.random.default_rng(seed)
    replace = n_cells > len(eligible)
    chosen = rng.choice(np.array(eligible), size=n_cells, replace=replace)
    records, truth = [], {}
    for i, entry_id in enumerate(chosen):
        entry = bank.entry_by_id(int(entry_id))
        p = _normalized_params(entry, bank.bounds)
        n_eol = int(np.clip(round((350.0 + 33.0 * entry.t_end)
                                  * math.exp(rng.normal(0.0, 0.04))),
                            cycle_range[0], cycle_range[1]))
        cycles = np.arange(n_eol + 1)
        u = cycles / n_eol
        soh = entry.shape_at(u)
        if noise_sigma > 0:
            soh = soh + rng.normal(0.0, noise_sigma, len(soh))
        soh = np.clip(soh, 0.01, 1.2)
        n = len(cycles)
        temp = 34.0 - 9.0 * p["b0"] - 5.0 * (1.0 - p["t_p"]) + 7.0 * p["a0"] \
            + rng.normal(0.0, 0.4, n)
        chg = 0.6 + 2.2 * p["b0"] + 1.2 * (1.0 - p["t_p"]) \
            + rng.normal(0.0, 0.04, n)
        dis = 0.8 + 1.4 * p["k"] + 0.6 * p["a0"] + rng.normal(0.0, 0.04, n)
        volt = 3.55 + 0.22 * p["c"] - 0.08 * p["k"] + 0.15 * p["t_p"] \
            + rng.normal(0.0, 0.01, n)
        chemistry = SYNTH_CHEMISTRIES[int(rng.integers(0, len(SYNTH_CHEMISTRIES)))]
        ic = float(rng.uniform(1.0, 3.0))
        cell_id = f"synth-{i:03d}"
        records.append(CellRecord(
            cell_id=cell_id, chemistry=chemistry, initial_capacity_ah=ic,
            cycles=cycles, capacity_ah=soh * ic, temp_c=temp,
            chg_current_a=chg, dis_current_a=dis, voltage_v=volt))
        truth[cell_id] = {"entry_id": int(entry_id), "n_eol": n_eol}
    return records, truth


def split_cells(cell_ids: list[str], seed: int = 0, val_count: int | None = None,
                test_count: int | None = None) -> dict[str, list[str]]:
    """Deterministic train/val/test split; defaults scale the 36/8/16 ratio."""
    n = len(cell_ids)
    if val_count is None:
        val_count = max(1, round(n * 8 / 60))
    if test_count is None:
        test_count = max(1, round(n * 16 / 60))
    if val_count + test_count >= n:
        raise ContractError("split leaves no training cells")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(np.array(cell_ids)))
    return {"val": sorted(order[:val_count]),
            "test": sorted(order[val_count:val_count + test_count]),
            "train": sorted(order[val_count + test_count:])}


def write_manifest(path: str, splits: dict, truth: dict, meta: dict) -> None:
    doc = {"splits": splits, "truth": truth, **meta}
    atomic_write_bytes(path, json.dumps(doc, sort_keys=True, indent=1)
                       .encode("utf-8"))


def read_manifest(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataValidationError(f"cannot read manifest {path}: {exc}") from exc


# --- metrics -------------------------------------------------------------------

def evaluate(pred_cycles, pred_values, true_cycles, true_values,
             horizon_start: int = 0) -> MetricsReport:
    """MSE/MAE/MAPE over SoH on the shared cycle grid past horizon_start.

    The overlap is the intersection of the two integer cycle grids restricted
    to cycles >= horizon_start (prediction and truth truncate to the shorter
    series automatically).
    """
    pred_cycles = np.asarray(pred_cycles, dtype=np.int64)
    true_cycles = np.asarray(true_cycles, dtype=np.int64)
    pred_values = np.asarray(pred_values, dtype=np.float64)
    true_values = np.asarray(true_values, dtype=np.float64)
    common, pi, ti = np.intersect1d(pred_cycles, true_cycles,
                                    return_indices=True)
    keep = common >= horizon_start
    if not np.any(keep):
        raise ContractError("no overlapping cycles past the horizon start")
    p = pred_values[pi[keep]]
    t = true_values[ti[keep]]
    if np.any(t == 0):
        raise ContractError("true values must be bounded away from zero")
    err = p - t
    return MetricsReport(mse=float(np.mean(err * err)),
                         mae=float(np.mean(np.abs(err))),
                         mape=float(np.mean(np.abs(err) / np.abs(t))))
