"""Synthetic household load generator for dataset-free testing.

Produces minute-resolution series in the same CSV schema as real exports.
Occupied stretches add a stochastic appliance load on top of a noisy base
load, so power and occupancy are correlated exactly as strongly as the
profile dictates (zero appliance load gives an uninformative series).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import datetime, timezone

import numpy as np

from .data import MeterSeries

# minute index of a Monday 00:00 (day 15502 since the epoch)
_DEFAULT_START = 15_502 * 1440


@dataclass(frozen=True)
class SynthProfile:
    name: str = "separable"
    minutes: int = 56_640  # 944 windows, enough for the length criterion
    base_load_w: float = 100.0
    occupied_load_w: float = 400.0
    noise_w: float = 15.0
    occupied_block_minutes: tuple[int, int] = (240, 960)
    vacant_block_minutes: tuple[int, int] = (120, 480)
    start_minute: int = _DEFAULT_START
    household: str = "synthetic"


PROFILES = {
    "separable": SynthProfile(),
    "uncorrelated": SynthProfile(name="uncorrelated", occupied_load_w=0.0),
}


def synth_case(profile: SynthProfile, seed: int) -> MeterSeries:
    """Generate one deterministic household-period for the given profile."""
    rng = np.random.default_rng(seed)
    occupied = np.empty(profile.minutes, dtype=np.int8)
    pos = 0
    state = int(rng.integers(0, 2))
    while pos < profile.minutes:
        lo, hi = (profile.occupied_block_minutes if state
                  else profile.vacant_block_minutes)
        length = int(rng.integers(lo, hi + 1))
        occupied[pos:pos + length] = state
        pos += length
        state = 1 - state

    power = profile.base_load_w + rng.normal(0.0, profile.noise_w, profile.minutes)
    activity = profile.occupied_load_w * rng.uniform(0.5, 1.5, profile.minutes)
    power = np.maximum(power + occupied * activity, 0.0)

    timestamps = profile.start_minute + np.arange(profile.minutes, dtype=np.int64)
    return MeterSeries(profile.household, profile.name, timestamps, power,
                       occupied, resolution="1min")


def with_minutes(profile: SynthProfile, minutes: int) -> SynthProfile:
    return replace(profile, minutes=minutes)


def write_meter_csv(series: MeterSeries, path) -> None:
    """Emit the shared CSV schema with ISO-8601 minute timestamps."""
    if series.resolution != "1min":
        raise ValueError("CSV writer expects a minute-resolution series")
    lines = ["timestamp,power_w,occupied"]
    for ts, p, occ in zip(series.timestamps, series.power, series.occupied):
        stamp = datetime.fromtimestamp(int(ts) * 60, tz=timezone.utc)
        lines.append(f"{stamp.strftime('%Y-%m-%dT%H:%M')},{p:.3f},{int(occ)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
