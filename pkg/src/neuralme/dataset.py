"""Pressure waveform tables and their CSV format.

CSV layout: header ``t,p_<segid>,...``, time in seconds, pressures in Pa,
comma separated, '.' decimal point, LF line endings.  Values are written
with 17 significant digits so a write/read cycle is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, ParseError


@dataclass
class Dataset:
    times: np.ndarray
    pressures: np.ndarray
    segment_ids: tuple
    patient: dict = field(default_factory=dict)
    rate: Optional[float] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.pressures = np.asarray(self.pressures, dtype=float)
        self.segment_ids = tuple(self.segment_ids)
        if self.pressures.ndim != 2 or self.pressures.shape != (self.times.size, len(self.segment_ids)):
            raise DimensionMismatch(
                f"pressures shape {self.pressures.shape} does not match "
                f"{self.times.size} times x {len(self.segment_ids)} segments"
            )

    @property
    def n_samples(self) -> int:
        return self.times.size

    @property
    def n_obs(self) -> int:
        return len(self.segment_ids)

    @property
    def heart_rate(self):
        return self.patient.get("heart_rate")

    def column(self, seg_id) -> np.ndarray:
        return self.pressures[:, self.segment_ids.index(seg_id)]

    def to_csv(self, path) -> None:
        write_waveform_csv(path, self.times, self.pressures, self.segment_ids)

    @classmethod
    def from_csv(cls, path, heart_rate=None, label="") -> "Dataset":
        times, pressures, ids = read_waveform_csv(path)
        rate = None
        if times.size > 1:
            dt = np.diff(times)
            if np.all(np.abs(dt - dt.mean()) <= 1e-9 * max(1.0, abs(times[-1]))):
                rate = float(round(1.0 / dt.mean(), 9))
        patient = {"label": label or Path(path).stem}
        if heart_rate is not None:
            patient["heart_rate"] = float(heart_rate)
        return cls(times, pressures, ids, patient, rate)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_waveform_csv(path, times, pressures, segment_ids) -> None:
    pressures = np.asarray(pressures)
    lines = [",".join(["t"] + [f"p_{s}" for s in segment_ids])]
    for t, row in zip(times, pressures):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in row]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_waveform_csv(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read waveform file {str(path)!r}: {exc.strerror}") from None
    rows = [ln for ln in text.split("\n") if ln.strip()]
    if not rows:
        raise ParseError(f"{path}: empty waveform file", 1, 1)
    header = [h.strip() for h in rows[0].split(",")]
    if not header or header[0] != "t" or not all(h.startswith("p_") for h in header[1:]):
        raise ParseError(f"{path}: header must be 't,p_<segid>,...'", 1, 1)
    ids = []
    for h in header[1:]:
        key = h[2:]
        ids.append(int(key) if key.lstrip("-").isdigit() else key)
    data = np.empty((len(rows) - 1, len(header)))
    for i, ln in enumerate(rows[1:], start=2):
        cells = ln.split(",")
        if len(cells) != len(header):
            raise ParseError(f"{path}: expected {len(header)} columns, got {len(cells)}", i, 1)
        for j, c in enumerate(cells):
            try:
                data[i - 2, j] = float(c)
            except ValueError:
                col = sum(len(x) + 1 for x in cells[:j]) + 1
                raise ParseError(f"{path}: not a number: {c!r}", i, col) from None
    return data[:, 0].copy(), data[:, 1:].copy(), tuple(ids)
