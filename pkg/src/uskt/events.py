"""Event-camera streams: parsing, voxel grids, synthetic datasets.

An event is an (x, y, t, p) tuple: pixel column/row, timestamp in
seconds, and polarity +1/-1.  Streams are held as packed numpy arrays
sorted by timestamp.  ``voxelize`` bins them into a T x H x W grid by
accumulating polarity per (time-bin, rescaled pixel) cell.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .errors import FormatError, ShapeError

EVT_MAGIC = b"EVT1"
# packed little-endian record: u16 x, u16 y, f64 t, i8 p, i8 padding
_EVT_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<f8"),
                        ("p", "i1"), ("pad", "i1")])
assert _EVT_RECORD.itemsize == 14


@dataclass(frozen=True)
class EventRecord:
    x: int
    y: int
    t: float
    p: int


@dataclass
class EventStream:
    """Time-sorted events plus the sensor geometry and time window."""

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray
    sensor_width: int
    sensor_height: int
    t_start: float = 0.0
    t_end: float = 0.0

    def __post_init__(self) -> None:
        n = len(self.ts)
        if not (len(self.xs) == len(self.ys) == len(self.ps) == n):
            raise ShapeError("EventStream: field arrays must have equal length")
        if n:
            if np.any(np.diff(self.ts) < 0):
                raise FormatError("EventStream: events not sorted by timestamp")
            if self.xs.max() >= self.sensor_width or self.ys.max() >= self.sensor_height:
                raise FormatError("EventStream: coordinate outside sensor bounds")
            if not np.isin(self.ps, (-1, 1)).all():
                raise FormatError("EventStream: polarity must be +1 or -1")
            if self.ts[0] < self.t_start or self.ts[-1] > self.t_end:
                raise FormatError("EventStream: timestamps outside [t_start, t_end]")

    def __len__(self) -> int:
        return len(self.ts)

    def records(self) -> Iterator[EventRecord]:
        for x, y, t, p in zip(self.xs, self.ys, self.ts, self.ps):
            yield EventRecord(int(x), int(y), float(t), int(p))

    @classmethod
    def from_arrays(cls, xs, ys, ts, ps, sensor_width, sensor_height,
                    t_start=None, t_end=None) -> "EventStream":
        """Build a stream from unsorted arrays; sorts stably by timestamp."""
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        ts = np.asarray(ts, dtype=np.float64)
        ps = np.asarray(ps, dtype=np.int64)
        order = np.argsort(ts, kind="stable")
        xs, ys, ts, ps = xs[order], ys[order], ts[order], ps[order]
        if len(ts):
            t0 = float(ts[0]) if t_start is None else float(t_start)
            t1 = float(ts[-1]) if t_end is None else float(t_end)
        else:
            t0 = 0.0 if t_start is None else float(t_start)
            t1 = 0.0 if t_end is None else float(t_end)
        return cls(xs, ys, ts, ps, int(sensor_width), int(sensor_height), t0, t1)

    @classmethod
    def empty(cls, sensor_width: int, sensor_height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0), z, sensor_width, sensor_height, 0.0, 0.0)


@dataclass
class VoxelGrid:
    """T x H x W accumulation of event polarities."""

    bins: int
    height: int
    width: int
    data: np.ndarray
    aggregation: Literal["sum", "average"] = "sum"

    def __post_init__(self) -> None:
        if self.data.shape != (self.bins, self.height, self.width):
            raise ShapeError(
                f"VoxelGrid: data shape {self.data.shape} != "
                f"({self.bins}, {self.height}, {self.width})")


# ----------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------

def _convert_polarity(raw: int, where: str, zero_is_negative: bool) -> int:
    if raw == 1 or raw == -1:
        return raw
    if raw == 0 and zero_is_negative:
        return -1
    raise FormatError(f"{where}: polarity {raw} not in {{+1, -1}}"
                      + ("" if zero_is_negative else " (pass zero_is_negative to map 0 -> -1)"))


def parse_csv_events(path, sensor_size: tuple[int, int],
                     zero_is_negative: bool = False,
                     t_start: float | None = None,
                     t_end: float | None = None) -> EventStream:
    """Parse UTF-8 lines of ``x,y,t,p`` (optional header) into a stream.

    ``sensor_size`` is (width, height).  Rows are sorted stably by
    timestamp; the window defaults to [min t, max t].
    """
    width, height = sensor_size
    xs: list[int] = []
    ys: list[int] = []
    ts: list[float] = []
    ps: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
            try:
                x, y = int(parts[0]), int(parts[1])
                t = float(parts[2])
                p = int(parts[3])
            except ValueError:
                if lineno == 1 and not xs:
                    continue    # header row
                raise FormatError(f"{path}:{lineno}: malformed line {line!r}") from None
            idx = len(xs)
            if x < 0 or x >= width or y < 0 or y >= height:
                raise FormatError(
                    f"{path}: record {idx}: coordinate ({x}, {y}) outside sensor {width}x{height}")
            ps.append(_convert_polarity(p, f"{path}: record {idx}", zero_is_negative))
            xs.append(x)
            ys.append(y)
            ts.append(t)
    return EventStream.from_arrays(xs, ys, ts, ps, width, height, t_start, t_end)


def parse_evt_binary(path, zero_is_negative: bool = False,
                     t_start: float | None = None,
                     t_end: float | None = None) -> EventStream:
    """Parse the EVT1 packed binary format (see ``write_evt_binary``)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != EVT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {EVT_MAGIC!r}")
    header_len = 4 + 2 + 2 + 8
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated header at byte {len(raw)} (need {header_len})")
    width, height, count = struct.unpack_from("<HHQ", raw, 4)
    expected = header_len + count * _EVT_RECORD.itemsize
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated at byte {len(raw)}: header claims {count} records "
            f"({expected} bytes)")
    recs = np.frombuffer(raw, dtype=_EVT_RECORD, count=count, offset=header_len)
    ps = recs["p"].astype(np.int64)
    bad = ~np.isin(ps, (-1, 1))
    if zero_is_negative:
        ps = np.where(ps == 0, -1, ps)
        bad = ~np.isin(ps, (-1, 1))
    if bad.any():
        idx = int(np.argmax(bad))
        raise FormatError(f"{path}: record {idx}: polarity {int(recs['p'][idx])} not in {{+1, -1}}")
    xs = recs["x"].astype(np.int64)
    ys = recs["y"].astype(np.int64)
    if count and (xs.max() >= width or ys.max() >= height):
        idx = int(np.argmax((xs >= width) | (ys >= height)))
        raise FormatError(
            f"{path}: record {idx}: coordinate ({xs[idx]}, {ys[idx]}) outside sensor {width}x{height}")
    return EventStream.from_arrays(xs, ys, recs["t"].astype(np.float64), ps,
                                   width, height, t_start, t_end)


def write_evt_binary(stream: EventStream, path) -> None:
    """Write a stream in the EVT1 format (the inverse of ``parse_evt_binary``)."""
    recs = np.zeros(len(stream), dtype=_EVT_RECORD)
    recs["x"] = stream.xs
    recs["y"] = stream.ys
    recs["t"] = stream.ts
    recs["p"] = stream.ps
    with open(path, "wb") as fh:
        fh.write(EVT_MAGIC)
        fh.write(struct.pack("<HHQ", stream.sensor_width, stream.sensor_height, len(stream)))
        fh.write(recs.tobytes())


# ----------------------------------------------------------------------
# voxelization
# ----------------------------------------------------------------------

def voxelize(stream: EventStream, bins: int, height: int, width: int,
             aggregation: Literal["sum", "average"] = "sum") -> VoxelGrid:
    """Accumulate polarities into a T x H x W grid.

    Bin index is floor(T * (t - t_start) / (t_end - t_start)), clamped
    to T-1 at the t = t_end boundary.  Spatial coordinates rescale by
    nearest-neighbor (integer floor scaling) from sensor dims to H x W.
    """
    if bins < 1:
        raise ShapeError(f"voxelize: bins must be >= 1, got {bins}")
    if aggregation not in ("sum", "average"):
        raise ShapeError(f"voxelize: unknown aggregation {aggregation!r}")
    grid = np.zeros((bins, height, width), dtype=np.float32)
    if len(stream) == 0:
        return VoxelGrid(bins, height, width, grid, aggregation)
    span = stream.t_end - stream.t_start
    if span <= 0:
        raise ShapeError(f"voxelize: degenerate time window [{stream.t_start}, {stream.t_end}]")
    k = np.floor(bins * (stream.ts - stream.t_start) / span).astype(np.int64)
    np.clip(k, 0, bins - 1, out=k)
    xr = np.minimum(stream.xs * width // stream.sensor_width, width - 1)
    yr = np.minimum(stream.ys * height // stream.sensor_height, height - 1)
    np.add.at(grid, (k, yr, xr), stream.ps.astype(np.float32))
    if aggregation == "average":
        counts = np.zeros((bins, height, width), dtype=np.float32)
        np.add.at(counts, (k, yr, xr), 1.0)
        nz = counts > 0
        grid[nz] /= counts[nz]
    return VoxelGrid(bins, height, width, grid, aggregation)


# ----------------------------------------------------------------------
# synthetic datasets
# ----------------------------------------------------------------------

@dataclass
class SynthConfig:
    classes: int = 3
    samples_per_class: int = 10
    seed: int = 42
    bins: int = 5
    height: int = 224
    width: int = 224
    noise_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ShapeError(f"SynthConfig: need >= 2 classes, got {self.classes}")


_PATTERNS = ("horizontal_bar", "vertical_bar", "diagonal_dot", "expanding_square")


def _bar_events(rng, cfg, horizontal: bool, speed_boost: int):
    h, w, t = cfg.height, cfg.width, cfg.bins
    extent = h if horizontal else w
    span = w if horizontal else h
    speed = int(rng.integers(1, max(2, extent // max(t, 1)))) + speed_boost
    phase = int(rng.integers(0, extent))
    gap = int(rng.integers(1, max(2, extent // 4)))
    events = []
    for k in range(t):
        tk = (k + 0.5) / t
        lead = (phase + k * speed) % extent
        trail = (lead - gap) % extent
        for c in range(span):
            if horizontal:
                events.append((c, lead, tk, 1))
                events.append((c, trail, tk, -1))
            else:
                events.append((lead, c, tk, 1))
                events.append((trail, c, tk, -1))
    return events


def _dot_events(rng, cfg, speed_boost: int):
    h, w, t = cfg.height, cfg.width, cfg.bins
    d = max(2, min(h, w) // 32)
    speed = int(rng.integers(1, max(2, min(h, w) // max(t, 1)))) + speed_boost
    ry = int(rng.integers(0, h))
    rx = int(rng.integers(0, w))
    events = []
    for k in range(t):
        tk = (k + 0.5) / t
        cy, cx = (ry + k * speed) % h, (rx + k * speed) % w
        py, px = (ry + (k - 1) * speed) % h, (rx + (k - 1) * speed) % w
        for dy in range(d):
            for dx in range(d):
                events.append(((cx + dx) % w, (cy + dy) % h, tk, 1))
                events.append(((px + dx) % w, (py + dy) % h, tk, -1))
    return events


def _square_events(rng, cfg, speed_boost: int):
    h, w, t = cfg.height, cfg.width, cfg.bins
    cy, cx = h // 2, w // 2
    dr = 1 + speed_boost
    r0 = int(rng.integers(dr + 1, max(dr + 2, min(h, w) // 8)))

    def perimeter(r):
        pts = set()
        for off in range(-r, r + 1):
            pts.add(((cx + off) % w, (cy - r) % h))
            pts.add(((cx + off) % w, (cy + r) % h))
            pts.add(((cx - r) % w, (cy + off) % h))
            pts.add(((cx + r) % w, (cy + off) % h))
        return sorted(pts)

    events = []
    for k in range(t):
        tk = (k + 0.5) / t
        for x, y in perimeter(r0 + k * dr):
            events.append((x, y, tk, 1))
        for x, y in perimeter(r0 + (k - 1) * dr):
            events.append((x, y, tk, -1))
    return events


def gen_synthetic_dataset(cfg: SynthConfig) -> list[tuple[VoxelGrid, int]]:
    """Deterministic labeled voxel grids: one moving pattern per class.

    Class c uses pattern c mod 4 with a class-dependent speed so classes
    beyond the four base patterns remain distinguishable.  Samples of a
    class vary in phase/speed via the per-sample rng.  Uniform noise
    events are added at ``noise_rate`` per pixel per bin.
    """
    out: list[tuple[VoxelGrid, int]] = []
    h, w, t = cfg.height, cfg.width, cfg.bins
    for label in range(cfg.classes):
        pattern = _PATTERNS[label % len(_PATTERNS)]
        boost = label // len(_PATTERNS)
        for i in range(cfg.samples_per_class):
            rng = np.random.default_rng([cfg.seed, label, i])
            if pattern == "horizontal_bar":
                events = _bar_events(rng, cfg, True, boost)
            elif pattern == "vertical_bar":
                events = _bar_events(rng, cfg, False, boost)
            elif pattern == "diagonal_dot":
                events = _dot_events(rng, cfg, boost)
            else:
                events = _square_events(rng, cfg, boost)
            n_noise = int(round(cfg.noise_rate * h * w * t))
            for _ in range(n_noise):
                events.append((int(rng.integers(0, w)), int(rng.integers(0, h)),
                               float(rng.uniform(0.0, 1.0)),
                               int(rng.choice((-1, 1)))))
            xs, ys, ts, ps = zip(*events)
            stream = EventStream.from_arrays(xs, ys, ts, ps, w, h,
                                             t_start=0.0, t_end=1.0)
            out.append((voxelize(stream, t, h, w, "sum"), label))
    return out
