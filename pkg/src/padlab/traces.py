"""Packet-trace data model, geometric time binning, and overhead accounting.

A trace is a time-ordered stream of (timestamp, direction) packet events for a
single page load or flow.  Downstream components consume a fixed-length binned
representation: the count of download packets falling into each of L time bins
whose interior edges form a geometric progression, so early bursts are resolved
finely while the tail of the page load is covered coarsely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Direction convention: positive = client->server (upload) by default.
UP = 1
DOWN = -1


class ParseError(ValueError):
    """A trace file line could not be parsed."""


class EmptyTraceError(ParseError):
    """The input contained no packet events."""


class ShortTraceError(ValueError):
    """The trace has too few packets for the requested operation."""


class ConfigError(ValueError):
    """Invalid binning or defense configuration."""


class UndefinedOverheadError(ValueError):
    """Overhead is undefined because the trace has no real packets."""


@dataclass
class Trace:
    """Time-ordered packet events (seconds, direction) for one page load.

    ``times`` is float64 seconds, non-decreasing; ``dirs`` holds +1 (UP) or
    -1 (DOWN) per packet.  ``label``/``instance`` carry optional corpus
    metadata (site class and instance id).
    """

    times: np.ndarray
    dirs: np.ndarray
    label: int | None = None
    instance: int | None = None

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        self.dirs = np.asarray(self.dirs, dtype=np.int8)
        if self.times.shape != self.dirs.shape or self.times.ndim != 1:
            raise ValueError("times and dirs must be 1-D arrays of equal length")
        if len(self.times) > 1 and np.any(np.diff(self.times) < 0):
            raise ValueError("timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def packets(self) -> list[tuple[float, int]]:
        """Packets as a list of (seconds, direction) tuples."""
        return list(zip(self.times.tolist(), self.dirs.tolist()))

    def count(self, direction: int) -> int:
        return int(np.count_nonzero(self.dirs == direction))


@dataclass
class BinEdges:
    """Bin boundaries: [0, t_min, ..., span] with geometric interior spacing.

    ``edges`` has L+1 entries; bin i covers [edges[i], edges[i+1]).  Bin 0 is
    the stub [0, t_min) so the whole of [0, span) is covered without a
    zero-width first bin.
    """

    edges: np.ndarray
    span: float
    L: int
    t_min: float

    def __post_init__(self) -> None:
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if len(self.edges) != self.L + 1:
            raise ConfigError(f"expected {self.L + 1} edges, got {len(self.edges)}")
        if np.any(np.diff(self.edges) <= 0):
            raise ConfigError("edges must be strictly increasing")

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def starts(self) -> np.ndarray:
        return self.edges[:-1]


@dataclass
class BinnedTrace:
    """Length-L vector of download-packet volume per time bin.

    Real traces have integer counts; defended or model-generated volumes may
    be fractional.  All entries are non-negative.
    """

    volumes: np.ndarray

    def __post_init__(self) -> None:
        self.volumes = np.asarray(self.volumes, dtype=np.float64)
        if self.volumes.ndim != 1:
            raise ValueError("volumes must be a 1-D vector")
        if np.any(self.volumes < 0):
            raise ValueError("bin volumes must be non-negative")

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def total(self) -> float:
        return float(self.volumes.sum())


@dataclass
class OverheadReport:
    """Bandwidth-overhead accounting for one defended trace or a corpus."""

    dummy_down: int
    dummy_up: int
    real_down: int
    real_up: int

    @property
    def bandwidth_oh(self) -> float:
        """Dummy packets per real packet, both directions combined."""
        return (self.dummy_down + self.dummy_up) / (self.real_down + self.real_up)


def parse_trace(
    text: str,
    label: int | None = None,
    instance: int | None = None,
    up_sign: int = UP,
) -> Trace:
    """Parse a line-oriented packet record into a Trace.

    Each non-empty line is "timestamp<TAB>direction" with direction +1/-1
    (``up_sign`` selects which sign means upload).  Lines slightly out of
    order are tolerated and sorted.  Raises ParseError with the offending
    line number on malformed input and EmptyTraceError if no packets remain.
    """
    times: list[float] = []
    dirs: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"line {lineno}: expected 'time<TAB>direction', got {line!r}")
        try:
            t = float(parts[0])
            d = int(float(parts[1]))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: non-numeric field in {line!r}") from exc
        if d not in (1, -1):
            raise ParseError(f"line {lineno}: direction must be +1 or -1, got {d}")
        times.append(t)
        dirs.append(UP if d == up_sign else DOWN)
    if not times:
        raise EmptyTraceError("trace contains no packets")
    order = np.argsort(np.asarray(times), kind="stable")
    return Trace(
        times=np.asarray(times, dtype=np.float64)[order],
        dirs=np.asarray(dirs, dtype=np.int8)[order],
        label=label,
        instance=instance,
    )


def serialize_trace(trace: Trace, up_sign: int = UP) -> str:
    """Render a Trace back to the canonical "t<TAB>d" line format."""
    sign = 1 if up_sign == UP else -1
    lines = [
        f"{t!r}\t{int(d) * sign}"
        for t, d in zip(trace.times.tolist(), trace.dirs.tolist())
    ]
    return "\n".join(lines) + "\n"


def shift_to_nth_packet(trace: Trace, n: int = 10) -> Trace:
    """Re-origin a trace at its n-th packet (1-indexed).

    Packets before the n-th are dropped (their role — circuit setup — is
    handled by preload padding in the scheduler); remaining timestamps are
    shifted so the n-th packet sits at t = 0.
    """
    if len(trace) < n:
        raise ShortTraceError(f"trace has {len(trace)} packets, need at least {n}")
    origin = trace.times[n - 1]
    return Trace(
        times=trace.times[n - 1 :] - origin,
        dirs=trace.dirs[n - 1 :].copy(),
        label=trace.label,
        instance=trace.instance,
    )


def make_bin_edges(span: float = 50.0, L: int = 256, t_min: float = 0.01) -> BinEdges:
    """Build L+1 bin edges: 0, then a geometric ladder from t_min to span."""
    if not (0 < t_min < span):
        raise ConfigError(f"need 0 < t_min < span, got t_min={t_min}, span={span}")
    if L < 2:
        raise ConfigError(f"need at least 2 bins, got L={L}")
    edges = np.empty(L + 1, dtype=np.float64)
    edges[0] = 0.0
    edges[1:] = np.geomspace(t_min, span, L)
    return BinEdges(edges=edges, span=float(span), L=int(L), t_min=float(t_min))


def bin_trace(trace: Trace, edges: BinEdges) -> BinnedTrace:
    """Count download packets per bin; bins are half-open [lo, hi).

    The trace is expected to be re-origined already (t = 0 at the binning
    origin).  Packets at or past the span, upload packets, and any packets
    before t = 0 are excluded.
    """
    t = trace.times[trace.dirs == DOWN]
    t = t[(t >= 0.0) & (t < edges.span)]
    idx = np.searchsorted(edges.edges, t, side="right") - 1
    volumes = np.bincount(idx, minlength=edges.L).astype(np.float64)
    return BinnedTrace(volumes=volumes[: edges.L])


def add_binned(real: BinnedTrace, dummy: BinnedTrace) -> BinnedTrace:
    """Element-wise sum of two binned traces (defend = real + dummy)."""
    if len(real) != len(dummy):
        raise ValueError(f"length mismatch: {len(real)} vs {len(dummy)}")
    return BinnedTrace(volumes=real.volumes + dummy.volumes)


def bandwidth_overhead(real: Trace, defended) -> OverheadReport:
    """Overhead report: dummy-to-real packet ratio across both directions.

    ``defended`` must flag each packet real or dummy (see
    scheduler.DefendedTrace); real counts come from the original trace.
    """
    real_down = real.count(DOWN)
    real_up = real.count(UP)
    if real_down + real_up == 0:
        raise UndefinedOverheadError("no real packets; overhead undefined")
    dummy_mask = defended.dummy
    dummy_down = int(np.count_nonzero(defended.dirs[dummy_mask] == DOWN))
    dummy_up = int(np.count_nonzero(defended.dirs[dummy_mask] == UP))
    return OverheadReport(
        dummy_down=dummy_down,
        dummy_up=dummy_up,
        real_down=real_down,
        real_up=real_up,
    )
