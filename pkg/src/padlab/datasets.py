"""Corpus ingestion, synthetic corpus generation, and stratified partitioning.

The synthetic corpus stands in for real website-fingerprinting and
flow-correlation datasets at desk scale.  Each class is a template of a few
download bursts at class-specific times and sizes (total volume equalized
across classes so classifiers must read structure, not size); instances are
noisy draws from the template.  Flow-correlation mode derives an exit-side
flow from each entry flow by per-packet jitter, a small drop rate, and a
constant forwarding shift.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .traces import (
    DOWN,
    UP,
    ConfigError,
    EmptyTraceError,
    ShortTraceError,
    Trace,
    bin_trace,
    parse_trace,
    serialize_trace,
    shift_to_nth_packet,
)

logger = logging.getLogger(__name__)

MIN_PACKETS = 10

_LABELED = re.compile(r"^(\d+)-(\d+)$")
_UNLABELED = re.compile(r"^(\d+)$")


@dataclass
class Corpus:
    """A list of traces plus ingestion bookkeeping."""

    traces: list
    labeled: bool = True
    skipped: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def by_class(self) -> dict:
        out: dict = {}
        for tr in self.traces:
            out.setdefault(tr.label, []).append(tr)
        return out

    def class_counts(self) -> dict:
        return {c: len(v) for c, v in self.by_class().items()}


def load_corpus(directory) -> Corpus:
    """Read every trace file in a corpus directory.

    Files named "<class>-<instance>" form a labeled corpus; bare "<instance>"
    names form an unlabeled one.  Mixing conventions is an error.  Traces
    with fewer than 10 packets are skipped and reported.
    """
    directory = Path(directory)
    names = sorted(p.name for p in directory.iterdir() if p.is_file())
    if not names:
        raise ConfigError(f"no trace files in {directory}")
    labeled_names = [n for n in names if _LABELED.match(n)]
    unlabeled_names = [n for n in names if _UNLABELED.match(n)]
    if labeled_names and unlabeled_names:
        raise ConfigError("mixed labeled and unlabeled file names in corpus directory")
    if not labeled_names and not unlabeled_names:
        raise ConfigError("no files match '<class>-<instance>' or '<instance>' naming")
    labeled = bool(labeled_names)

    traces, skipped = [], []
    for name in labeled_names or unlabeled_names:
        m = _LABELED.match(name) if labeled else _UNLABELED.match(name)
        label, instance = (
            (int(m.group(1)), int(m.group(2))) if labeled else (None, int(m.group(1)))
        )
        text = (directory / name).read_text()
        try:
            tr = parse_trace(text, label=label, instance=instance)
        except EmptyTraceError:
            skipped.append(name)
            continue
        if len(tr) < MIN_PACKETS:
            skipped.append(name)
            continue
        traces.append(tr)
    if skipped:
        logger.warning("skipped %d short/empty trace files", len(skipped))
    return Corpus(traces=traces, labeled=labeled, skipped=skipped)


def save_corpus(corpus, directory) -> None:
    """Write traces back out in the corpus directory layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, tr in enumerate(corpus):
        name = f"{tr.label}-{tr.instance}" if tr.label is not None else str(
            tr.instance if tr.instance is not None else i
        )
        (directory / name).write_text(serialize_trace(tr))


def save_defended_corpus(defendeds, directory) -> None:
    """Write defended traces (with dummy flags) in the corpus layout."""
    from .scheduler import serialize_defended

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, dt in enumerate(defendeds):
        name = f"{dt.label}-{dt.instance}" if dt.label is not None else str(
            dt.instance if dt.instance is not None else i
        )
        (directory / name).write_text(serialize_defended(dt))


def load_defended_corpus(directory):
    """Read a directory of defended traces; naming rules as load_corpus."""
    from .scheduler import parse_defended

    directory = Path(directory)
    names = sorted(p.name for p in directory.iterdir() if p.is_file())
    if not names:
        raise ConfigError(f"no trace files in {directory}")
    labeled_names = [n for n in names if _LABELED.match(n)]
    unlabeled_names = [n for n in names if _UNLABELED.match(n)]
    if labeled_names and unlabeled_names:
        raise ConfigError("mixed labeled and unlabeled file names in corpus directory")
    if not labeled_names and not unlabeled_names:
        raise ConfigError("no files match '<class>-<instance>' or '<instance>' naming")
    labeled = bool(labeled_names)

    out = []
    for name in labeled_names or unlabeled_names:
        m = _LABELED.match(name) if labeled else _UNLABELED.match(name)
        label, instance = (
            (int(m.group(1)), int(m.group(2))) if labeled else (None, int(m.group(1)))
        )
        out.append(parse_defended((directory / name).read_text(), label=label, instance=instance))
    return out


def _class_template(rng, volume_scale: float):
    """Random class signature: burst times, relative sizes, widths."""
    n_bursts = int(rng.integers(2, 11))
    centers = np.sort(rng.uniform(0.3, 12.0, size=n_bursts))
    rel_sizes = rng.dirichlet(np.full(n_bursts, 1.0))
    widths = rng.uniform(0.03, 0.5, size=n_bursts)
    total_down = 950.0 * volume_scale  # equal across classes; structure varies
    return {
        "centers": centers,
        "sizes": rel_sizes * total_down,
        "widths": widths,
        "chatter_rate": float(rng.uniform(1.0, 4.0)),
    }


def _draw_instance(rng, template, label, instance) -> Trace:
    """One noisy page load from a class template, with a 9-packet setup prefix.

    Load-to-load variance mirrors repeated visits to one page: a shared
    speed factor stretches the whole timeline, a shared volume factor
    scales every burst, individual bursts jitter in time/size/width, and
    an occasional resource goes missing entirely.
    """
    down_t, up_t = [], []
    # connection setup: 9 packets before the page-load origin
    setup = np.sort(rng.uniform(0.0, 0.2, size=9))
    setup_dirs = np.array([UP, UP, DOWN, UP, DOWN, DOWN, UP, DOWN, DOWN], dtype=np.int8)
    page_start = 0.25 + rng.uniform(0.0, 0.1)
    speed = rng.lognormal(0.0, 0.06)
    volume = rng.lognormal(0.0, 0.08)

    for center, size, width in zip(
        template["centers"], template["sizes"], template["widths"]
    ):
        if len(template["centers"]) > 3 and rng.random() < 0.02:
            continue
        c = page_start + speed * (center + rng.normal(0.0, 0.12))
        m = max(1, int(round(size * volume * rng.lognormal(0.0, 0.12))))
        w = width * speed * rng.lognormal(0.0, 0.08)
        burst = rng.normal(c, w, size=m)
        down_t.append(np.clip(burst, page_start, None))
        # request/ack upload traffic at roughly 1:8 of the burst
        n_up = max(1, m // 8)
        up_t.append(np.clip(rng.normal(c - 0.05, w, size=n_up), page_start, None))
    # background chatter across the whole load
    n_chat = rng.poisson(template["chatter_rate"] * 10.0)
    down_t.append(rng.uniform(page_start, page_start + 12.0, size=n_chat))

    down = np.concatenate(down_t)
    up = np.concatenate(up_t)
    times = np.concatenate([setup, down, up])
    dirs = np.concatenate(
        [setup_dirs, np.full(len(down), DOWN, np.int8), np.full(len(up), UP, np.int8)]
    )
    order = np.argsort(times, kind="stable")
    return Trace(times=times[order], dirs=dirs[order], label=label, instance=instance)


def synth_corpus(classes: int, instances: int, seed: int, volume_scale: float = 1.0) -> Corpus:
    """Deterministic labeled corpus of noisy template draws.

    Classes share the same expected download volume, so separating them
    requires temporal/burst structure; ``volume_scale`` scales every class's
    volume for overhead-calibration experiments.
    """
    if classes < 2 or instances < 2:
        raise ConfigError("need at least 2 classes and 2 instances per class")
    traces = []
    for c in range(classes):
        template = _class_template(np.random.default_rng([seed, c]), volume_scale)
        for i in range(instances):
            rng = np.random.default_rng([seed, c, i])
            traces.append(_draw_instance(rng, template, label=c, instance=i))
    return Corpus(traces=traces, labeled=True)


def exit_transform(entry: Trace, rng) -> Trace:
    """Model of how a relayed circuit reshapes a flow at its far side.

    Per-packet Gaussian jitter (sigma 20 ms), 2% packet drop, and a constant
    40 ms forwarding shift.
    """
    keep = rng.random(len(entry)) >= 0.02
    times = entry.times[keep] + 0.040 + rng.normal(0.0, 0.020, size=int(keep.sum()))
    dirs = entry.dirs[keep]
    order = np.argsort(times, kind="stable")
    return Trace(
        times=np.clip(times[order], 0.0, None),
        dirs=dirs[order],
        label=entry.label,
        instance=entry.instance,
    )


def synth_flows(n_flows: int, seed: int, volume_scale: float = 1.0):
    """Matched (entry, exit) flow pairs, each flow its own random template.

    Unlike the labeled corpus, flows vary in total volume (matched sides
    share it), as volume agreement is a primary correlation signal.
    """
    if n_flows < 2:
        raise ConfigError("need at least 2 flows")
    pairs = []
    for i in range(n_flows):
        t_rng = np.random.default_rng([seed, 7919, i])
        template = _class_template(t_rng, volume_scale * float(t_rng.uniform(0.6, 1.5)))
        rng = np.random.default_rng([seed, 104729, i])
        entry = _draw_instance(rng, template, label=None, instance=i)
        exit_ = exit_transform(entry, rng)
        pairs.append((entry, exit_))
    return pairs


def partition(corpus, n: int, seed: int):
    """Split a labeled corpus into n class-stratified partitions.

    Within each class, instances are shuffled once (seeded) then dealt
    round-robin, so partition sizes per class differ by at most one and
    every class appears in every partition.
    """
    if n < 2:
        raise ConfigError("need at least 2 partitions")
    by_class = {}
    for tr in corpus:
        by_class.setdefault(tr.label, []).append(tr)
    for label, members in by_class.items():
        if len(members) < n:
            raise ConfigError(
                f"class {label} has {len(members)} instances; cannot split {n} ways"
            )
    parts = [[] for _ in range(n)]
    for label in sorted(by_class, key=lambda x: (x is None, x)):
        members = sorted(by_class[label], key=lambda tr: tr.instance)
        rng = np.random.default_rng([seed, label if label is not None else -1])
        order = rng.permutation(len(members))
        for slot, idx in enumerate(order):
            parts[slot % n].append(members[idx])
    return parts


def binned_dataset(traces, edges, origin_packet: int = MIN_PACKETS):
    """Shift each trace to its page origin and bin it; returns (X, y).

    Traces too short to have an origin are dropped (with a warning), keeping
    X and y aligned.
    """
    rows, labels = [], []
    dropped = 0
    for tr in traces:
        try:
            shifted = shift_to_nth_packet(tr, origin_packet)
        except ShortTraceError:
            dropped += 1
            continue
        rows.append(bin_trace(shifted, edges).volumes)
        labels.append(tr.label if tr.label is not None else -1)
    if dropped:
        logger.warning("dropped %d short traces while binning", dropped)
    X = np.asarray(rows, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    return X, y
