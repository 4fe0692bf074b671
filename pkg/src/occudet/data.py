"""Smart-meter data preparation.

Raw exports arrive as CSV with header ``timestamp,power_w,occupied`` where the
timestamp is either ISO-8601 at minute resolution or integer epoch seconds for
1 Hz exports. Second-level series are averaged into minutes, minute series are
cut into non-overlapping 60-minute windows with (power, minute-of-day,
day-of-week) feature rows, qualified cases are split 3:1:1, min-max normalized,
and the minority class of the training split is oversampled to parity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .checkpoint import read_array_archive, write_array_archive

WINDOW_MINUTES = 60
MINUTES_PER_DAY = 1440
# 1970-01-01 was a Thursday; day-of-week is encoded Monday=0 .. Sunday=6
_EPOCH_WEEKDAY = 3

MIN_SAMPLES = 900
MIN_CLASS_SHARE = 0.10


@dataclass
class MeterSeries:
    """One household-period of meter readings with occupancy ground truth.

    Timestamps are minutes since the epoch at resolution "1min", or seconds
    since the epoch at resolution "1s" (the pre-aggregation form).
    """

    household: str
    period: str
    timestamps: np.ndarray
    power: np.ndarray
    occupied: np.ndarray
    resolution: str = "1min"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.power = np.asarray(self.power, dtype=np.float64)
        self.occupied = np.asarray(self.occupied, dtype=np.int8)
        if not (len(self.timestamps) == len(self.power) == len(self.occupied)):
            raise ValueError("timestamp/power/occupancy lengths differ")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(self.power < 0):
            raise ValueError("power readings must be non-negative")
        if self.resolution not in ("1s", "1min"):
            raise ValueError(f"unknown resolution {self.resolution!r}")

    def __len__(self):
        return len(self.timestamps)


def load_meter_csv(path, household: str = "", period: str = "") -> MeterSeries:
    """Read a meter CSV. Integer timestamps mean epoch seconds at 1 Hz;
    anything else is parsed as ISO-8601 at minute resolution."""
    timestamps, power, occupied = [], [], []
    second_level = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "power_w", "occupied"]:
            raise ValueError(
                f"{path}: expected header 'timestamp,power_w,occupied', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            ts_raw = row[0].strip()
            is_int = ts_raw.lstrip("-").isdigit()
            if second_level is None:
                second_level = is_int
            elif second_level != is_int:
                raise ValueError(f"{path}:{lineno}: mixed timestamp formats")
            if is_int:
                ts = int(ts_raw)
            else:
                try:
                    dt = datetime.fromisoformat(ts_raw)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: bad timestamp {ts_raw!r}") from exc
                if dt.tzinfo is None:
                    dt = dt.replace(tzinfo=timezone.utc)
                ts = int(dt.timestamp()) // 60
            timestamps.append(ts)
            power.append(float(row[1]))
            occ = row[2].strip()
            if occ not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: occupied must be 0 or 1, got {occ!r}")
            occupied.append(int(occ))
    if not timestamps:
        raise ValueError(f"{path}: no records")
    return MeterSeries(household, period, np.array(timestamps), np.array(power),
                       np.array(occupied),
                       resolution="1s" if second_level else "1min")


def aggregate_to_minutes(series: MeterSeries) -> MeterSeries:
    """Average second-level readings into minutes; minute series pass through.

    Each minute's power is the arithmetic mean of however many second-level
    readings it has; minutes with no readings simply stay absent. Minute
    occupancy is the majority of its readings, ties counting as occupied.
    """
    if len(series) == 0:
        raise ValueError("cannot aggregate an empty series")
    if series.resolution == "1min":
        return series
    minutes = series.timestamps // 60
    uniq, starts = np.unique(minutes, return_index=True)
    counts = np.diff(np.append(starts, len(minutes)))
    power = np.add.reduceat(series.power, starts) / counts
    occ_votes = np.add.reduceat(series.occupied.astype(np.int64), starts)
    occupied = (2 * occ_votes >= counts).astype(np.int8)
    return MeterSeries(series.household, series.period, uniq, power, occupied,
                       resolution="1min")


def minute_features(timestamps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minute-of-day in [0, 1439] and day-of-week in [0, 6] (Monday=0)."""
    tod = timestamps % MINUTES_PER_DAY
    dow = (timestamps // MINUTES_PER_DAY + _EPOCH_WEEKDAY) % 7
    return tod, dow


def build_windows(series: MeterSeries) -> tuple[np.ndarray, np.ndarray]:
    """Cut a minute series into non-overlapping 60-minute samples.

    Windows are aligned to the first timestamp; any window missing a minute
    is dropped, as is a short tail. Returns features of shape (n, 1, 3, 60)
    with rows (power, minute-of-day, day-of-week) and the majority occupancy
    label per window (a 30/30 tie counts as occupied).
    """
    if series.resolution != "1min":
        raise ValueError("build_windows needs a minute-resolution series")
    ts = series.timestamps
    if len(ts) == 0:
        return np.zeros((0, 1, 3, WINDOW_MINUTES)), np.zeros(0, dtype=np.int8)
    start = ts[0]
    span = int(ts[-1] - start + 1)
    feats, labels = [], []
    for k in range(span // WINDOW_MINUTES):
        w0 = start + k * WINDOW_MINUTES
        i = int(np.searchsorted(ts, w0))
        j = i + WINDOW_MINUTES
        if j > len(ts) or ts[i] != w0 or ts[j - 1] != w0 + WINDOW_MINUTES - 1:
            continue  # at least one minute missing
        wts = ts[i:j]
        tod, dow = minute_features(wts)
        feats.append(np.stack([series.power[i:j], tod, dow])[None, :, :])
        occ = int(series.occupied[i:j].sum())
        labels.append(1 if 2 * occ >= WINDOW_MINUTES else 0)
    if not feats:
        return np.zeros((0, 1, 3, WINDOW_MINUTES)), np.zeros(0, dtype=np.int8)
    return np.stack(feats).astype(np.float64), np.array(labels, dtype=np.int8)


@dataclass
class CaseWindows:
    case_id: str
    family: str  # "eco" (1 Hz source, length rule applies) or "niom"
    features: np.ndarray  # (n, 1, 3, 60)
    labels: np.ndarray  # (n,)

    @property
    def class_counts(self) -> tuple[int, int]:
        """(occupied, vacant) window counts."""
        occ = int(np.sum(self.labels == 1))
        return occ, len(self.labels) - occ


def qualification(case: CaseWindows) -> tuple[bool, str]:
    """Apply the quality rules: enough samples (eco families only) and both
    classes above a 10% share."""
    n = len(case.labels)
    if case.family == "eco" and n <= MIN_SAMPLES:
        return False, f"only {n} samples (need more than {MIN_SAMPLES})"
    occ, vac = case.class_counts
    share = min(occ, vac) / n if n else 0.0
    if share <= MIN_CLASS_SHARE:
        return False, (f"minority class share {share:.1%} "
                       f"(need more than {MIN_CLASS_SHARE:.0%})")
    return True, "qualified"


@dataclass
class DatasetCase:
    """A qualified case after splitting, normalization, and oversampling."""

    case_id: str
    seed: int
    norm_fit: str
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    feature_min: np.ndarray  # (3,) per feature row
    feature_max: np.ndarray
    class_counts: tuple[int, int]  # (occupied, vacant) over all windows


def _normalize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    span = np.where(span > 0, span, 1.0)
    scaled = (x - lo[None, None, :, None]) / span[None, None, :, None]
    return np.clip(scaled, 0.0, 1.0)


def split_normalize_oversample(case: CaseWindows, seed: int,
                               norm_fit: str = "train") -> DatasetCase:
    """Random 3:1:1 split, per-feature min-max scaling, minority oversampling.

    Normalization statistics are fitted on the training split by default
    (norm_fit="all" fits them on the whole case instead); validation and test
    values falling outside the fitted range are clamped to [0, 1]. Only the
    training split is oversampled, with replacement, to exact class parity,
    and its final order is shuffled.
    """
    if norm_fit not in ("train", "all"):
        raise ValueError(f"norm_fit must be 'train' or 'all', got {norm_fit!r}")
    n = len(case.labels)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = round(0.6 * n)
    n_val = round(0.2 * n)
    tr, va, te = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]

    train_y = case.labels[tr].copy()
    classes, counts = np.unique(train_y, return_counts=True)
    if len(classes) < 2:
        raise ValueError(
            f"case {case.case_id}, seed {seed}: training split contains a "
            f"single class ({classes.tolist()}); cannot train a classifier")

    fit_pool = case.features[tr] if norm_fit == "train" else case.features
    lo = fit_pool.min(axis=(0, 1, 3))
    hi = fit_pool.max(axis=(0, 1, 3))

    train_x = _normalize(case.features[tr], lo, hi)
    val_x = _normalize(case.features[va], lo, hi)
    test_x = _normalize(case.features[te], lo, hi)

    minority = classes[np.argmin(counts)]
    deficit = int(abs(counts[0] - counts[1]))
    if deficit:
        pool = np.flatnonzero(train_y == minority)
        extra = rng.choice(pool, size=deficit, replace=True)
        train_x = np.concatenate([train_x, train_x[extra]])
        train_y = np.concatenate([train_y, train_y[extra]])
    reorder = rng.permutation(len(train_y))
    return DatasetCase(
        case_id=case.case_id,
        seed=seed,
        norm_fit=norm_fit,
        train_x=train_x[reorder],
        train_y=train_y[reorder],
        val_x=val_x,
        val_y=case.labels[va].copy(),
        test_x=test_x,
        test_y=case.labels[te].copy(),
        feature_min=lo,
        feature_max=hi,
        class_counts=case.class_counts,
    )


def prepare_case(csv_path, case_id: str, family: str, seed: int,
                 norm_fit: str = "train") -> DatasetCase:
    """Full pipeline from a CSV export to a ready DatasetCase.

    Raises ValueError when the case fails qualification.
    """
    series = aggregate_to_minutes(load_meter_csv(csv_path, household=case_id))
    features, labels = build_windows(series)
    case = CaseWindows(case_id, family, features, labels)
    ok, reason = qualification(case)
    if not ok:
        raise ValueError(f"case {case_id} not qualified: {reason}")
    return split_normalize_oversample(case, seed, norm_fit)


def save_dataset_case(path, case: DatasetCase) -> None:
    meta = {
        "case_id": case.case_id,
        "seed": case.seed,
        "norm_fit": case.norm_fit,
        "class_counts": list(case.class_counts),
    }
    write_array_archive(path, {
        "train_x": case.train_x, "train_y": case.train_y,
        "val_x": case.val_x, "val_y": case.val_y,
        "test_x": case.test_x, "test_y": case.test_y,
        "feature_min": case.feature_min, "feature_max": case.feature_max,
        "__meta__": np.array(json.dumps(meta, sort_keys=True)),
    })


def load_dataset_case(path) -> DatasetCase:
    arrays = read_array_archive(path)
    meta = json.loads(str(arrays["__meta__"]))
    return DatasetCase(
        case_id=meta["case_id"],
        seed=int(meta["seed"]),
        norm_fit=meta["norm_fit"],
        train_x=arrays["train_x"], train_y=arrays["train_y"],
        val_x=arrays["val_x"], val_y=arrays["val_y"],
        test_x=arrays["test_x"], test_y=arrays["test_y"],
        feature_min=arrays["feature_min"], feature_max=arrays["feature_max"],
        class_counts=tuple(meta["class_counts"]),
    )
