"""Network definitions, losses, and the generator weights-file format.

Four networks cooperate in the adversarial pipeline:

* ``EmbedderNet``      — 1-D conv encoder mapping a 256-bin trace to a
                         256-d embedding (trained with triplet loss).
* ``WFDiscriminatorNet`` — same backbone; predicts the *undefended* trace's
                         embedding from a defended trace.
* ``FCDiscriminatorNet`` — twin conv branches over (entry, exit) bin vectors
                         joined into a single match probability.
* ``GeneratorNet``     — single-layer LSTM padding policy: per time bin it
                         consumes (noise, previous real volume, bin start
                         time) and emits a non-negative raw padding
                         intensity via a softplus head.

Raw intensities become dummy-packet volumes by budget normalization: offline
the whole round is scaled so volumes sum exactly to the download budget; live
(causal) each step is scaled by a calibration constant Z with a hard cap at
twice the budget.

The generator's trained parameters travel to the live proxy in a small
versioned binary container (magic, metadata, named float32 arrays, trailing
SHA-256).  That format is the compatibility contract between this package and
any external consumer; see docs/weights_format.md.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

logger = logging.getLogger(__name__)

EMBED_DIM = 256
INPUT_LEN = 256
VOLUME_SCALE = math.log1p(1000.0)

WEIGHTS_MAGIC = b"PADW"
WEIGHTS_VERSION = 1


class WeightsFormatError(ValueError):
    """The weights file is malformed or incompatible."""


class ChecksumError(WeightsFormatError):
    """The weights file failed integrity verification."""


class VersionError(WeightsFormatError):
    """The weights file declares an unsupported format version."""


class NonFiniteError(RuntimeError):
    """A non-finite value appeared where finite numerics are required."""


def scale_volume(v):
    """Compress a packet count into a bounded LSTM input feature."""
    if isinstance(v, torch.Tensor):
        return torch.log1p(v) / VOLUME_SCALE
    return math.log1p(v) / VOLUME_SCALE


class _ConvBlock(nn.Module):
    """conv -> batch norm -> leaky ReLU -> max pool -> dropout."""

    def __init__(self, c_in, c_out, pool, stride, dropout=0.1):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel_size=8, padding=4)
        self.bn = nn.BatchNorm1d(c_out)
        self.act = nn.LeakyReLU(0.01)
        self.pool = nn.MaxPool1d(kernel_size=pool, stride=stride)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.pool(self.act(self.bn(self.conv(x)))))


class EmbedderNet(nn.Module):
    """Conv encoder: 256 bin volumes -> 256-d embedding.

    Bin volumes are log-compressed on entry so raw counts of any realistic
    magnitude stay in a trainable range.  The architecture is the classic
    stacked conv-pool fingerprinting backbone sized down for length-256
    input: channels 32/64/128/256, kernel 8, pooling 8/4 then 4/2.
    """

    def __init__(self, out_dim: int = EMBED_DIM):
        super().__init__()
        self.blocks = nn.Sequential(
            _ConvBlock(1, 32, pool=8, stride=4),
            _ConvBlock(32, 64, pool=8, stride=4),
            _ConvBlock(64, 128, pool=4, stride=2),
            _ConvBlock(128, 256, pool=4, stride=2),
        )
        self.fc1 = nn.Linear(256 * 3, 512)
        self.act = nn.LeakyReLU(0.01)
        self.drop = nn.Dropout(0.5)
        self.fc2 = nn.Linear(512, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 1:
            x = x.unsqueeze(0)
        x = torch.log1p(x).unsqueeze(1)  # [B, 1, L]
        x = self.blocks(x)
        x = x.flatten(1)
        return self.fc2(self.drop(self.act(self.fc1(x))))


class WFDiscriminatorNet(EmbedderNet):
    """Predicts the undefended trace's embedding from a defended trace."""


class FCDiscriminatorNet(nn.Module):
    """Match probability for an (entry, exit) flow pair.

    Each flow is encoded by its own conv branch; branch outputs are
    concatenated and reduced to one sigmoid unit.  Output is strictly
    inside (0, 1) after clamping at fp32 sigmoid saturation.
    """

    def __init__(self):
        super().__init__()
        self.entry_branch = self._branch()
        self.exit_branch = self._branch()
        self.fc1 = nn.Linear(2 * 128 * 7, 256)
        self.act = nn.LeakyReLU(0.01)
        self.drop = nn.Dropout(0.3)
        self.fc2 = nn.Linear(256, 1)

    @staticmethod
    def _branch():
        return nn.Sequential(
            _ConvBlock(1, 32, pool=8, stride=4),
            _ConvBlock(32, 64, pool=8, stride=4),
            _ConvBlock(64, 128, pool=4, stride=2),
        )

    def forward(self, entry: torch.Tensor, exit_: torch.Tensor) -> torch.Tensor:
        if entry.ndim == 1:
            entry, exit_ = entry.unsqueeze(0), exit_.unsqueeze(0)
        e = self.entry_branch(torch.log1p(entry).unsqueeze(1)).flatten(1)
        x = self.exit_branch(torch.log1p(exit_).unsqueeze(1)).flatten(1)
        z = self.fc2(self.drop(self.act(self.fc1(torch.cat([e, x], dim=1)))))
        return torch.sigmoid(z).squeeze(-1)


class GeneratorNet(nn.Module):
    """LSTM padding policy: per-bin raw intensity from (noise, volume, time).

    Input size is ``noise_dim + 2`` (default 32): the noise vector, the
    log-scaled previous-bin real volume, and the bin start time as a
    fraction of the span.  A single linear head with softplus keeps raw
    intensities non-negative.  The recurrent-recurrent bias is fixed at
    zero (redundant with the input bias), so the weights file carries one
    merged bias vector.
    """

    def __init__(self, noise_dim: int = 30, hidden: int = 128):
        super().__init__()
        self.noise_dim = noise_dim
        self.hidden = hidden
        self.input_size = noise_dim + 2
        self.lstm = nn.LSTM(self.input_size, hidden, num_layers=1, batch_first=True)
        self.head = nn.Linear(hidden, 1)
        with torch.no_grad():
            self.lstm.bias_hh_l0.zero_()
        self.lstm.bias_hh_l0.requires_grad_(False)

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def forward(self, inputs: torch.Tensor, state=None):
        """Run the LSTM over step inputs [B, T, input_size] -> raws [B, T]."""
        out, state = self.lstm(inputs, state)
        raw = F.softplus(self.head(out)).squeeze(-1)
        return raw, state

    def step(self, state, noise: torch.Tensor, prev_vol: float, t_feat: float):
        """One inference step; returns (new state, raw intensity scalar).

        ``noise`` is a length-noise_dim vector; ``prev_vol`` is the previous
        bin's real download volume (scaled internally); ``t_feat`` is the
        bin start time divided by the span.
        """
        noise = torch.as_tensor(noise, dtype=self.head.weight.dtype).reshape(-1)
        if noise.numel() != self.noise_dim:
            raise ValueError(f"noise must have {self.noise_dim} entries")
        feats = torch.tensor(
            [scale_volume(float(prev_vol)), float(t_feat)], dtype=noise.dtype
        )
        if not (torch.isfinite(noise).all() and torch.isfinite(feats).all()):
            raise NonFiniteError("generator step received non-finite inputs")
        x = torch.cat([noise, feats]).view(1, 1, -1)
        with torch.no_grad():
            raw, state = self.forward(x, state)
        return state, float(raw.squeeze())


def triplet_loss(a_emb, p_emb, n_emb, alpha: float = 1.0) -> torch.Tensor:
    """max(||a-p||^2 - ||a-n||^2 + alpha, 0), mean over any batch dim."""
    a_emb, p_emb, n_emb = (torch.as_tensor(v) for v in (a_emb, p_emb, n_emb))
    if not (a_emb.shape == p_emb.shape == n_emb.shape):
        raise ValueError("triplet embeddings must share one shape")
    d_ap = ((a_emb - p_emb) ** 2).sum(dim=-1)
    d_an = ((a_emb - n_emb) ** 2).sum(dim=-1)
    return torch.clamp(d_ap - d_an + alpha, min=0.0).mean()


def embedding_distance_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean distance between predicted and true embeddings."""
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    return torch.linalg.vector_norm(pred - target, dim=-1).mean()


def clamped_bce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    probs = torch.clamp(torch.as_tensor(probs, dtype=torch.float64), 1e-7, 1 - 1e-7)
    labels = torch.as_tensor(labels, dtype=torch.float64)
    return -(labels * torch.log(probs) + (1 - labels) * torch.log1p(-probs)).mean()


def step_time_features(edges) -> np.ndarray:
    """Bin-start fraction of span for generator steps (bins 1..L-1)."""
    return (edges.starts[1:] / edges.span).astype(np.float64)


def build_step_inputs(
    real_bins: torch.Tensor, noise_seq: torch.Tensor, edges
) -> torch.Tensor:
    """Assemble LSTM inputs for bins 1..L-1 from real volumes and noise.

    ``real_bins`` [B, L] and ``noise_seq`` [B, L-1, noise_dim]; step t's
    features are the (scaled) real volume of bin t-1 and bin t's start time.
    """
    if real_bins.ndim == 1:
        real_bins = real_bins.unsqueeze(0)
    noise_seq = torch.as_tensor(noise_seq, dtype=real_bins.dtype)
    if noise_seq.ndim == 2:
        noise_seq = noise_seq.unsqueeze(0)
    B, L = real_bins.shape
    if noise_seq.shape[:2] != (B, L - 1):
        raise ValueError(f"noise_seq must be [B, {L - 1}, noise_dim]")
    prev = scale_volume(real_bins[:, : L - 1]).unsqueeze(-1)
    t_feat = torch.as_tensor(
        step_time_features(edges), dtype=real_bins.dtype
    ).expand(B, L - 1).unsqueeze(-1)
    return torch.cat([noise_seq, prev, t_feat], dim=-1)


def generate_padding(
    G: GeneratorNet,
    real_bins: torch.Tensor,
    noise_seq: torch.Tensor,
    cfg,
    first_bin_raw,
    mode: str = "offline",
) -> torch.Tensor:
    """Dummy volumes [B, L] (or [L]) from raw generator intensities.

    Bin 0's raw intensity is the caller-supplied uniform draw; bins 1..L-1
    come from the LSTM, which at step t sees only real volumes of bins < t.
    Offline mode normalizes the full round to sum exactly to N_download
    (differentiable, used in training and trace simulation); live mode
    scales causally by the calibrated constant Z and caps the cumulative
    total at 2x the budget.
    """
    squeeze = real_bins.ndim == 1
    real_bins = torch.as_tensor(real_bins, dtype=torch.get_default_dtype())
    if squeeze:
        real_bins = real_bins.unsqueeze(0)
    B, L = real_bins.shape
    inputs = build_step_inputs(real_bins, noise_seq, cfg.edges)
    raws, _ = G(inputs)  # [B, L-1]
    first = torch.as_tensor(first_bin_raw, dtype=raws.dtype).reshape(-1)
    if first.numel() == 1:
        first = first.expand(B)
    raw_full = torch.cat([first.unsqueeze(1), raws], dim=1)  # [B, L]

    n = float(cfg.N_download)
    if mode == "offline":
        totals = raw_full.sum(dim=1, keepdim=True)
        dummy = torch.where(
            totals > 0,
            n * raw_full / totals,
            torch.full_like(raw_full, n / L),
        )
        if (totals <= 0).any():
            logger.warning("zero total raw intensity; fell back to uniform padding")
    elif mode == "live":
        scaled = n * raw_full / float(cfg.live_norm_Z)
        cap = 2.0 * n
        cum = torch.cumsum(scaled, dim=1)
        overflow = torch.clamp(cum - cap, min=0.0)
        prev_overflow = torch.cat(
            [torch.zeros(B, 1, dtype=scaled.dtype), overflow[:, :-1]], dim=1
        )
        dummy = scaled - (overflow - prev_overflow)
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return dummy.squeeze(0) if squeeze else dummy


def calibrate_live_norm(
    G: GeneratorNet, real_bins: torch.Tensor, cfg, seed: int = 0
) -> float:
    """Mean per-round total raw intensity over a sample of binned traces.

    Live mode scales raw intensities by ``N_download / Z``; using this
    estimate as Z makes the average live round emit roughly the same
    dummy volume the offline normalization enforces exactly.
    """
    real_bins = torch.as_tensor(real_bins, dtype=torch.get_default_dtype())
    if real_bins.ndim == 1:
        real_bins = real_bins.unsqueeze(0)
    B, L = real_bins.shape
    rng = np.random.default_rng([seed, 0x5A11])
    noise = torch.as_tensor(
        rng.standard_normal((B, L - 1, G.noise_dim)), dtype=real_bins.dtype
    )
    first = torch.as_tensor(
        rng.integers(0, cfg.first_bin_max + 1, size=B), dtype=real_bins.dtype
    )
    with torch.no_grad():
        raws, _ = G(build_step_inputs(real_bins, noise, cfg.edges))
    totals = first + raws.sum(dim=1)
    z = float(totals.mean())
    if not math.isfinite(z) or z <= 0:
        raise NonFiniteError("live-norm calibration produced a non-positive total")
    return z


# ---------------------------------------------------------------------------
# Weights container
# ---------------------------------------------------------------------------


@dataclass
class GeneratorWeights:
    """Named parameter arrays plus the policy metadata needed to run them."""

    metadata: dict[str, str]
    arrays: dict[str, np.ndarray]

    GENERATOR_ARRAYS = (
        "lstm.weight_ih",
        "lstm.weight_hh",
        "lstm.bias",
        "head.weight",
        "head.bias",
    )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(WEIGHTS_MAGIC)
        buf.write(struct.pack("<I", WEIGHTS_VERSION))
        buf.write(struct.pack("<I", len(self.metadata)))
        for key in sorted(self.metadata):
            _write_str(buf, key)
            _write_str(buf, self.metadata[key])
        buf.write(struct.pack("<I", len(self.arrays)))
        for name, arr in self.arrays.items():
            _write_str(buf, name)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GeneratorWeights":
        if len(blob) < len(WEIGHTS_MAGIC) + 8 + 32:
            raise WeightsFormatError("file too short to be a weights container")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("weights file checksum mismatch")
        buf = io.BytesIO(body)
        if buf.read(4) != WEIGHTS_MAGIC:
            raise WeightsFormatError("bad magic; not a weights container")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != WEIGHTS_VERSION:
            raise VersionError(f"unsupported weights version {version}")
        (n_meta,) = struct.unpack("<I", buf.read(4))
        metadata = {}
        for _ in range(n_meta):
            key = _read_str(buf)
            metadata[key] = _read_str(buf)
        (n_arrays,) = struct.unpack("<I", buf.read(4))
        arrays = {}
        for _ in range(n_arrays):
            name = _read_str(buf)
            (ndim,) = struct.unpack("<I", buf.read(4))
            shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = buf.read(4 * count)
            if len(data) != 4 * count:
                raise WeightsFormatError(f"array {name!r} truncated")
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        return cls(metadata=metadata, arrays=arrays)


def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<I", buf.read(4))
    raw = buf.read(n)
    if len(raw) != n:
        raise WeightsFormatError("truncated string field")
    return raw.decode("utf-8")


def export_weights(G: GeneratorNet, cfg, path=None, run_hash: str = "") -> GeneratorWeights:
    """Package generator parameters + defense config; optionally write file."""
    sd = {k: v.detach().cpu().numpy() for k, v in G.state_dict().items()}
    arrays = {
        "lstm.weight_ih": sd["lstm.weight_ih_l0"],
        "lstm.weight_hh": sd["lstm.weight_hh_l0"],
        "lstm.bias": sd["lstm.bias_ih_l0"] + sd["lstm.bias_hh_l0"],
        "head.weight": sd["head.weight"],
        "head.bias": sd["head.bias"],
    }
    edges = cfg.edges
    metadata = {
        "format": "padding-generator",
        "span": repr(float(edges.span)),
        "bins": str(edges.L),
        "t_min": repr(float(edges.t_min)),
        "n_download": repr(float(cfg.N_download)),
        "upload_ratio": repr(float(cfg.upload_ratio)),
        "restart_threshold": str(cfg.restart_threshold),
        "preload_mean_delay": repr(float(cfg.preload_mean_delay)),
        "first_bin_max": str(cfg.first_bin_max),
        "noise_dim": str(cfg.noise_dim),
        "live_norm_z": repr(float(cfg.live_norm_Z)),
        "run_hash": run_hash,
    }
    weights = GeneratorWeights(metadata=metadata, arrays=arrays)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(weights.to_bytes())
    return weights


def import_weights(path):
    """Load a weights file back into a (GeneratorNet, DefenseConfig) pair."""
    from .scheduler import DefenseConfig
    from .traces import make_bin_edges

    if isinstance(path, (bytes, bytearray)):
        blob = bytes(path)
    else:
        with open(path, "rb") as fh:
            blob = fh.read()
    w = GeneratorWeights.from_bytes(blob)
    missing = [n for n in GeneratorWeights.GENERATOR_ARRAYS if n not in w.arrays]
    if missing:
        raise WeightsFormatError(f"missing arrays: {missing}")
    meta = w.metadata
    noise_dim = int(meta["noise_dim"])
    hidden = w.arrays["lstm.weight_hh"].shape[1]
    G = GeneratorNet(noise_dim=noise_dim, hidden=hidden)
    expected = {
        "lstm.weight_ih": (4 * hidden, noise_dim + 2),
        "lstm.weight_hh": (4 * hidden, hidden),
        "lstm.bias": (4 * hidden,),
        "head.weight": (1, hidden),
        "head.bias": (1,),
    }
    for name, shape in expected.items():
        if w.arrays[name].shape != shape:
            raise WeightsFormatError(
                f"array {name!r} has shape {w.arrays[name].shape}, expected {shape}"
            )
    with torch.no_grad():
        G.lstm.weight_ih_l0.copy_(torch.from_numpy(w.arrays["lstm.weight_ih"]))
        G.lstm.weight_hh_l0.copy_(torch.from_numpy(w.arrays["lstm.weight_hh"]))
        G.lstm.bias_ih_l0.copy_(torch.from_numpy(w.arrays["lstm.bias"]))
        G.lstm.bias_hh_l0.zero_()
        G.head.weight.copy_(torch.from_numpy(w.arrays["head.weight"]))
        G.head.bias.copy_(torch.from_numpy(w.arrays["head.bias"]))
    cfg = DefenseConfig(
        N_download=float(meta["n_download"]),
        upload_ratio=float(meta["upload_ratio"]),
        edges=make_bin_edges(
            span=float(meta["span"]), L=int(meta["bins"]), t_min=float(meta["t_min"])
        ),
        restart_threshold=int(meta["restart_threshold"]),
        preload_mean_delay=float(meta["preload_mean_delay"]),
        first_bin_max=int(meta["first_bin_max"]),
        noise_dim=noise_dim,
        live_norm_Z=float(meta["live_norm_z"]),
    )
    return G, cfg


def save_module_weights(module: nn.Module, path, metadata=None) -> None:
    """Checkpoint any torch module in the same container format."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    meta = {"format": "module-checkpoint"}
    meta.update(metadata or {})
    w = GeneratorWeights(metadata=meta, arrays=arrays)
    with open(path, "wb") as fh:
        fh.write(w.to_bytes())


def load_module_weights(module: nn.Module, path) -> dict[str, str]:
    """Restore a checkpoint written by save_module_weights; returns metadata."""
    with open(path, "rb") as fh:
        w = GeneratorWeights.from_bytes(fh.read())
    state = {k: torch.from_numpy(v) for k, v in w.arrays.items()}
    current = module.state_dict()
    for key, value in current.items():
        if key not in state:
            raise WeightsFormatError(f"checkpoint missing array {key!r}")
        state[key] = state[key].to(value.dtype).reshape(value.shape)
    module.load_state_dict(state)
    return w.metadata
