"""Sliding-window extraction from 2-D complex data maps (range x time).

A label is a length-d time slice at a test range cell; its features are the
same time interval taken from the neighboring range cells on both sides,
skipping a guard band so the label never leaks into its own features.
Extraction order is range-major, then time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import MapTooSmall, ParseError
from .synthetic import WindowPair

MAP_FORMAT = "selfcov-map"
MAP_VERSION = 1


@dataclass(frozen=True)
class DataMap:
    entries: np.ndarray  # (n_range, n_time) complex128

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.complex128)
        if arr.ndim != 2:
            raise ValueError(f"map must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("map contains NaN or Inf")
        object.__setattr__(self, "entries", arr)

    @property
    def n_range(self) -> int:
        return self.entries.shape[0]

    @property
    def n_time(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    d: int = 8
    guard: int = 1
    half_width: Optional[int] = None  # neighbor range cells per side; defaults to d
    stride_time: Optional[int] = None  # defaults to d (non-overlapping labels)

    def __post_init__(self):
        if self.half_width is None:
            object.__setattr__(self, "half_width", self.d)
        if self.stride_time is None:
            object.__setattr__(self, "stride_time", self.d)
        if self.d < 1 or self.guard < 0 or self.half_width < 1 or self.stride_time < 1:
            raise ValueError(f"invalid window spec: {self}")


def extract(data_map: DataMap, spec: WindowSpec) -> list[WindowPair]:
    """All complete (label, features) pairs; cells without a full neighborhood
    are skipped. Feature count is 2 * half_width per pair; truth is absent."""
    reach = spec.guard + spec.half_width
    pairs: list[WindowPair] = []
    entries = data_map.entries
    for r in range(reach, data_map.n_range - reach):
        below = np.arange(r - reach, r - spec.guard)
        above = np.arange(r + spec.guard + 1, r + reach + 1)
        rows = np.concatenate([below, above])
        for t in range(0, data_map.n_time - spec.d + 1, spec.stride_time):
            label = entries[r, t : t + spec.d]
            features = entries[rows, t : t + spec.d]
            pairs.append(WindowPair(label=label.copy(), features=features.copy()))
    if not pairs:
        raise MapTooSmall(
            f"map {data_map.n_range}x{data_map.n_time} has no complete window for {spec}"
        )
    return pairs


def save_map(path, data_map: DataMap, fmt: Optional[str] = None) -> None:
    fmt = fmt or _infer_format(path)
    if fmt == "csv":
        cols = [f"{p}_{t}" for t in range(data_map.n_time) for p in ("re", "im")]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for row in data_map.entries:
                cells = []
                for v in row:
                    cells.append(repr(float(v.real)))
                    cells.append(repr(float(v.imag)))
                fh.write(",".join(cells) + "\n")
        return
    header = {
        "format": MAP_FORMAT,
        "version": MAP_VERSION,
        "n_range": data_map.n_range,
        "n_time": data_map.n_time,
        "byte_order": "little",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(data_map.entries.astype("<c16")).tobytes())


def _infer_format(path) -> str:
    return "csv" if str(path).lower().endswith(".csv") else "complex-binary"


def load_map(path, fmt: Optional[str] = None) -> DataMap:
    """Read a map in complex-binary or CSV form; ParseError carries the byte
    offset (binary) or line number (CSV)."""
    fmt = fmt or _infer_format(path)
    if fmt not in ("complex-binary", "csv"):
        raise ValueError(f"unknown map format {fmt!r}")
    if not Path(path).exists():
        raise FileNotFoundError(f"no such map file: {path}")
    if fmt == "csv":
        return _load_csv(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad map header: {exc}") from None
        if header.get("format") != MAP_FORMAT:
            raise ParseError(f"not a map file: format={header.get('format')!r}")
        n_range, n_time = header["n_range"], header["n_time"]
        expected = n_range * n_time * 16
        raw = fh.read(expected)
        if len(raw) != expected:
            raise ParseError(f"truncated map payload at byte {fh.tell()}")
        if fh.read(1):
            raise ParseError(f"trailing bytes at byte {fh.tell() - 1}")
    entries = np.frombuffer(raw, dtype="<c16").astype(np.complex128).reshape(n_range, n_time)
    return DataMap(entries=entries)


def _load_csv(path) -> DataMap:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise ParseError("line 1: missing CSV header")
        n_cols = len(header.strip().split(","))
        if n_cols % 2 != 0:
            raise ParseError(f"line 1: expected re/im column pairs, got {n_cols} columns")
        n_time = n_cols // 2
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.strip().split(",")
            if len(cells) != n_cols:
                raise ParseError(f"line {lineno}: expected {n_cols} values, got {len(cells)}")
            try:
                vals = [float(c) for c in cells]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            rows.append([complex(vals[2 * t], vals[2 * t + 1]) for t in range(n_time)])
    if not rows:
        raise ParseError("line 2: CSV has a header but no data rows")
    return DataMap(entries=np.asarray(rows, dtype=np.complex128))
