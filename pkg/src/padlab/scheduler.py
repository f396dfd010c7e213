"""Padding realization: from per-bin dummy volumes to packet timestamps.

The generator decides *how many* dummy download packets each time bin gets;
this module decides *when* they are sent and merges them with the real
stream.  It also implements the three packet-level behaviors that frame a
defense round: preload padding before the page-load origin, rate-matched
upload padding, and the restart rule that re-arms the defense when a fresh
burst of download traffic arrives after a round has ended.  A
Rayleigh-burst baseline defense is included for comparison experiments.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .neuralcore import GeneratorNet, generate_padding
from .ratemeter import RateMeter
from .traces import DOWN, UP, BinEdges, ConfigError, ShortTraceError, Trace, bin_trace, make_bin_edges

logger = logging.getLogger(__name__)

POLL_INTERVAL = 0.005  # upload-ratio polling cadence, seconds
ORIGIN_PACKET = 10  # the packet whose arrival starts a defense round


@dataclass
class DefenseConfig:
    """Everything that determines a policy's behavior besides the weights.

    ``live_norm_Z`` is the causal normalization constant for live mode; if
    omitted it defaults to the expected raw-intensity total of an untrained
    generator (L * softplus(0)) and should be calibrated after training.
    """

    edges: BinEdges = field(default_factory=make_bin_edges)
    N_download: float = 3000.0
    upload_ratio: float = 5.0
    restart_threshold: int = 9
    preload_mean_delay: float = 0.1
    first_bin_max: int = 10
    noise_dim: int = 30
    live_norm_Z: float | None = None

    def __post_init__(self) -> None:
        if self.live_norm_Z is None:
            self.live_norm_Z = math.log(2.0) * self.edges.L
        positive = {
            "N_download": self.N_download,
            "upload_ratio": self.upload_ratio,
            "restart_threshold": self.restart_threshold,
            "preload_mean_delay": self.preload_mean_delay,
            "first_bin_max": self.first_bin_max,
            "noise_dim": self.noise_dim,
            "live_norm_Z": self.live_norm_Z,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.restart_threshold >= ORIGIN_PACKET:
            raise ConfigError(
                f"restart_threshold must stay below {ORIGIN_PACKET}, got {self.restart_threshold}"
            )

    def content_hash(self) -> str:
        text = "|".join(
            repr(v)
            for v in (
                self.N_download,
                self.upload_ratio,
                float(self.edges.span),
                self.edges.L,
                float(self.edges.t_min),
                self.restart_threshold,
                self.preload_mean_delay,
                self.first_bin_max,
                self.noise_dim,
                self.live_norm_Z,
            )
        )
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass
class DefendedTrace:
    """Merged real + dummy packet stream with per-packet dummy flags."""

    times: np.ndarray
    dirs: np.ndarray
    dummy: np.ndarray
    provenance: dict = field(default_factory=dict)
    label: int | None = None
    instance: int | None = None

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        self.dirs = np.asarray(self.dirs, dtype=np.int8)
        self.dummy = np.asarray(self.dummy, dtype=bool)

    def __len__(self) -> int:
        return len(self.times)

    def real_part(self) -> Trace:
        """The original trace: dummy packets removed."""
        keep = ~self.dummy
        return Trace(
            times=self.times[keep],
            dirs=self.dirs[keep],
            label=self.label,
            instance=self.instance,
        )

    def to_trace(self) -> Trace:
        """All packets as an unflagged trace (the on-wire view)."""
        return Trace(
            times=self.times.copy(),
            dirs=self.dirs.copy(),
            label=self.label,
            instance=self.instance,
        )

    def dummy_count(self, direction: int) -> int:
        return int(np.count_nonzero(self.dummy & (self.dirs == direction)))


def serialize_defended(dt: DefendedTrace) -> str:
    """Three-column text form: time, direction, R (real) or D (dummy)."""
    lines = [
        f"{t!r}\t{int(d)}\t{'D' if u else 'R'}"
        for t, d, u in zip(dt.times.tolist(), dt.dirs.tolist(), dt.dummy.tolist())
    ]
    return "\n".join(lines) + "\n"


def parse_defended(text: str, label=None, instance=None) -> DefendedTrace:
    """Inverse of serialize_defended."""
    times, dirs, dummy = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("R", "D"):
            raise ValueError(f"line {lineno}: expected 't<TAB>dir<TAB>R|D'")
        times.append(float(parts[0]))
        dirs.append(int(parts[1]))
        dummy.append(parts[2] == "D")
    return DefendedTrace(
        times=np.array(times), dirs=np.array(dirs), dummy=np.array(dummy),
        label=label, instance=instance,
    )


def schedule_bin(count: int, bin_start: float, bin_len: float, rng) -> np.ndarray:
    """Place ``count`` dummy packets as one burst inside (or spilling past) a bin.

    The burst starts uniformly inside the bin; subsequent inter-packet gaps
    are i.i.d. exponential with mean bin_len/count, so the burst fills the
    bin on average.  Spillover past the bin boundary is allowed here; the
    caller truncates at the round span.
    """
    if count <= 0:
        return np.empty(0)
    start = bin_start + rng.uniform(0.0, bin_len)
    if count == 1:
        return np.array([start])
    gaps = rng.exponential(bin_len / count, size=count - 1)
    return start + np.concatenate([[0.0], np.cumsum(gaps)])


def preload_padding(rng, cfg: DefenseConfig, until_t: float) -> np.ndarray:
    """Dummy download timestamps from t=0 up to (excluding) the round origin.

    Gaps are exponential with the configured mean delay, masking connection
    setup before enough packets have arrived to start the binned defense.
    """
    ts = []
    t = rng.exponential(cfg.preload_mean_delay)
    while t < until_t:
        ts.append(t)
        t += rng.exponential(cfg.preload_mean_delay)
    return np.asarray(ts, dtype=np.float64)


def upload_padding_step(up: RateMeter, down: RateMeter, t: float, ratio: float) -> bool:
    """Should a dummy upload packet be sent now to preserve the up:down ratio?

    Pure decision; on True the caller emits the packet and commits
    up.on_event(t) so the sent dummy counts toward the upload rate.
    """
    return up.read(t) < down.read(t) / ratio


def apportion_integer(volumes: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of non-negative volumes to integers.

    Scales volumes to sum to ``total``, floors, then hands the leftover
    units to the largest fractional remainders, so the result sums to
    ``total`` exactly with no systematic bias.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    if total <= 0 or volumes.sum() <= 0:
        return np.zeros(len(volumes), dtype=np.int64)
    scaled = volumes * (total / volumes.sum())
    counts = np.floor(scaled).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = scaled - counts
        # stable descending sort keeps ties deterministic
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def _round_dummy_times(
    G: GeneratorNet, real_bins, cfg: DefenseConfig, rng, origin: float
) -> np.ndarray:
    """One defense round: volumes from the generator, timestamps per bin."""
    edges = cfg.edges
    noise = rng.standard_normal((edges.L - 1, cfg.noise_dim))
    first_bin = float(rng.integers(0, cfg.first_bin_max + 1))
    with torch.no_grad():
        vols = generate_padding(
            G,
            torch.as_tensor(real_bins.volumes, dtype=torch.float32),
            torch.as_tensor(noise, dtype=torch.float32),
            cfg,
            first_bin,
            mode="offline",
        ).numpy()
    counts = apportion_integer(vols, int(round(cfg.N_download)))
    times = []
    for b in np.nonzero(counts)[0]:
        ts = schedule_bin(
            int(counts[b]), float(edges.edges[b]), float(edges.widths[b]), rng
        )
        times.append(ts)
    if not times:
        return np.empty(0)
    out = np.concatenate(times)
    # spillover past the final bin is kept but pinned to the span boundary
    np.clip(out, None, edges.span, out=out)
    return np.sort(out) + origin


def _upload_padding_sweep(
    times: np.ndarray, dirs: np.ndarray, end_t: float, ratio: float, poll: float = POLL_INTERVAL
) -> np.ndarray:
    """Poll the two rate meters over [0, end_t]; return dummy upload times.

    ``times``/``dirs`` cover every real and dummy-download packet; each
    observed packet feeds its direction's meter, and each poll tick emits a
    dummy upload whenever the upload rate has fallen below download/ratio.
    """
    up, down = RateMeter(), RateMeter()
    order = np.argsort(times, kind="stable")
    times, dirs = times[order], dirs[order]
    sent = []
    i = 0
    n = len(times)
    ticks = np.arange(0.0, end_t + poll / 2, poll)
    for t in ticks:
        while i < n and times[i] <= t:
            (down if dirs[i] == DOWN else up).on_event(times[i])
            i += 1
        if upload_padding_step(up, down, t, ratio):
            up.on_event(t)
            sent.append(t)
    return np.asarray(sent, dtype=np.float64)


def defend_trace_offline(
    trace: Trace, G: GeneratorNet, cfg: DefenseConfig, rng, seed=None
) -> DefendedTrace:
    """Apply the trained padding policy to a recorded trace.

    Round structure: preload padding runs from connection start until the
    10th packet (the first round's origin); each round bins the next span
    of real download traffic, asks the generator for per-bin dummy volumes,
    apportions them to integers summing exactly to the budget, and schedules
    the packets.  After a round ends, padding stays off until more than
    ``restart_threshold`` further download packets arrive; the packet that
    crosses the threshold becomes the next round's origin.  Upload dummies
    are added by rate-ratio polling over the whole defended stream.  Real
    packets are never moved or dropped.
    """
    if len(trace) < ORIGIN_PACKET:
        raise ShortTraceError(
            f"trace has {len(trace)} packets, need {ORIGIN_PACKET} to defend"
        )
    span = cfg.edges.span
    down_times_all = trace.times[trace.dirs == DOWN]

    origin = float(trace.times[ORIGIN_PACKET - 1])
    preload = preload_padding(rng, cfg, origin)

    dummy_down = [preload]
    round_origins = []
    while True:
        round_origins.append(origin)
        in_round = (down_times_all >= origin) & (down_times_all < origin + span)
        round_trace = Trace(
            times=down_times_all[in_round] - origin,
            dirs=np.full(int(in_round.sum()), DOWN, dtype=np.int8),
        )
        real_bins = bin_trace(round_trace, cfg.edges)
        dummy_down.append(_round_dummy_times(G, real_bins, cfg, rng, origin))
        # restart: wait for enough fresh download traffic after the round
        later = down_times_all[down_times_all >= origin + span]
        if len(later) <= cfg.restart_threshold:
            break
        origin = float(later[cfg.restart_threshold])

    dummy_down = np.concatenate(dummy_down)
    end_t = max(
        float(trace.times[-1]),
        float(dummy_down[-1]) if len(dummy_down) else 0.0,
    )
    obs_times = np.concatenate([trace.times, dummy_down])
    obs_dirs = np.concatenate(
        [trace.dirs, np.full(len(dummy_down), DOWN, dtype=np.int8)]
    )
    dummy_up = _upload_padding_sweep(obs_times, obs_dirs, end_t, cfg.upload_ratio)

    times = np.concatenate([trace.times, dummy_down, dummy_up])
    dirs = np.concatenate(
        [
            trace.dirs,
            np.full(len(dummy_down), DOWN, dtype=np.int8),
            np.full(len(dummy_up), UP, dtype=np.int8),
        ]
    )
    dummy = np.concatenate(
        [np.zeros(len(trace), dtype=bool), np.ones(len(dummy_down) + len(dummy_up), dtype=bool)]
    )
    order = np.argsort(times, kind="stable")
    return DefendedTrace(
        times=times[order],
        dirs=dirs[order],
        dummy=dummy[order],
        provenance={
            "config": cfg.content_hash(),
            "generator": generator_id(G),
            "seed": seed,
            "round_origins": round_origins,
            "preload_count": int(len(preload)),
        },
        label=trace.label,
        instance=trace.instance,
    )


def front_baseline(
    trace: Trace,
    N_s: int = 4000,
    N_c: int = 4000,
    W_min: float = 1.0,
    W_max: float = 14.0,
    rng=None,
) -> DefendedTrace:
    """Rayleigh-burst baseline defense: fixed-shape random padding.

    Client and server each draw a padding count uniformly from {1..N} and a
    window w uniformly from [W_min, W_max], then sample that many dummy
    timestamps from Rayleigh(scale=w) measured from the trace start.
    """
    if rng is None:
        raise ConfigError("an explicit rng is required for reproducibility")
    if min(N_s, N_c) < 1 or not (0 < W_min < W_max):
        raise ConfigError("need N_s, N_c >= 1 and 0 < W_min < W_max")
    base = float(trace.times[0]) if len(trace) else 0.0
    n_c = int(rng.integers(1, N_c + 1))
    n_s = int(rng.integers(1, N_s + 1))
    w_c = rng.uniform(W_min, W_max)
    w_s = rng.uniform(W_min, W_max)
    up_times = base + rng.rayleigh(scale=w_c, size=n_c)
    down_times = base + rng.rayleigh(scale=w_s, size=n_s)

    times = np.concatenate([trace.times, up_times, down_times])
    dirs = np.concatenate(
        [trace.dirs, np.full(n_c, UP, dtype=np.int8), np.full(n_s, DOWN, dtype=np.int8)]
    )
    dummy = np.concatenate([np.zeros(len(trace), dtype=bool), np.ones(n_c + n_s, dtype=bool)])
    order = np.argsort(times, kind="stable")
    return DefendedTrace(
        times=times[order],
        dirs=dirs[order],
        dummy=dummy[order],
        provenance={"config": f"rayleigh:{N_s},{N_c},{W_min},{W_max}"},
        label=trace.label,
        instance=trace.instance,
    )


def generator_id(G: GeneratorNet) -> str:
    """Short content hash of the generator's parameters."""
    h = hashlib.sha256()
    for name, p in sorted(G.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:12]


def defend_corpus(
    traces, G: GeneratorNet, cfg: DefenseConfig, seed: int, skip_short: bool = True
):
    """Defend every trace with an independent, order-insensitive RNG stream."""
    out = []
    skipped = 0
    for i, tr in enumerate(traces):
        # unlabeled traces (e.g. flows) hash to a sentinel outside the
        # label range so the stream stays order-insensitive and valid
        key = [seed, tr.label if tr.label is not None else 2**31 - 1,
               tr.instance if tr.instance is not None else i]
        rng = np.random.default_rng(key)
        try:
            out.append(defend_trace_offline(tr, G, cfg, rng, seed=seed))
        except ShortTraceError:
            if not skip_short:
                raise
            skipped += 1
    if skipped:
        logger.warning("skipped %d traces shorter than %d packets", skipped, ORIGIN_PACKET)
    return out


def aggregate_overhead(reals, defendeds):
    """Corpus-level overhead report from per-trace real/defended pairs."""
    from .traces import OverheadReport, bandwidth_overhead

    totals = dict(dummy_down=0, dummy_up=0, real_down=0, real_up=0)
    for real, dt in zip(reals, defendeds):
        rep = bandwidth_overhead(real, dt)
        for k in totals:
            totals[k] += getattr(rep, k)
    return OverheadReport(**totals)


def overhead_from_flags(defendeds):
    """Corpus-level overhead report using only the dummy flags."""
    from .traces import DOWN, UP, OverheadReport

    totals = dict(dummy_down=0, dummy_up=0, real_down=0, real_up=0)
    for dt in defendeds:
        down = dt.dirs == DOWN
        totals["dummy_down"] += int((down & dt.dummy).sum())
        totals["dummy_up"] += int((~down & dt.dummy).sum())
        totals["real_down"] += int((down & ~dt.dummy).sum())
        totals["real_up"] += int((~down & ~dt.dummy).sum())
    return OverheadReport(**totals)
