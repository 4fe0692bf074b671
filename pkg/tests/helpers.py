"""Fixture builders shared across the data, CLI, and acceptance tests."""

from __future__ import annotations

import numpy as np

from occudet.data import MeterSeries

# minute index of a Monday 00:00, same anchor the generator uses
MONDAY_MIDNIGHT = 15_502 * 1440


def minute_series(power, occupied, start_minute=MONDAY_MIDNIGHT,
                  household="fixture", period="p") -> MeterSeries:
    power = np.asarray(power, dtype=np.float64)
    ts = start_minute + np.arange(len(power), dtype=np.int64)
    return MeterSeries(household, period, ts, power,
                       np.asarray(occupied, dtype=np.int8), resolution="1min")


def blockwise_series(window_labels, seed=0, occupied_w=500.0, vacant_w=100.0,
                     noise_w=5.0, start_minute=MONDAY_MIDNIGHT) -> MeterSeries:
    """Minute series whose occupancy is constant within every 60-minute
    window, so the window labels are exactly the given sequence."""
    window_labels = np.asarray(window_labels, dtype=np.int8)
    occupied = np.repeat(window_labels, 60)
    rng = np.random.default_rng(seed)
    base = np.where(occupied == 1, occupied_w, vacant_w)
    power = np.maximum(base + rng.normal(0.0, noise_w, size=len(occupied)), 0.0)
    return minute_series(power, occupied, start_minute=start_minute)


def eco_like_series(n_windows=937, occupied_windows=769, seed=0) -> MeterSeries:
    """A case shaped like the first qualified 1 Hz-family period: 937 windows,
    769 occupied / 168 vacant."""
    labels = np.zeros(n_windows, dtype=np.int8)
    labels[:occupied_windows] = 1
    np.random.default_rng(seed).shuffle(labels)
    return blockwise_series(labels, seed=seed + 1)
