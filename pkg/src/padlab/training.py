"""Training loops: embedder pretraining, the two adversarial phases, and
partition rotation.

The fingerprinting phase first trains the embedder on undefended binned
traces with triplet loss, then freezes it and alternates one-batch updates
between the discriminator (predict the undefended trace's embedding from
the defended trace) and the generator (make that prediction fail).  The
flow-correlation phase alternates a matched/unmatched binary discriminator
against the generator, padding entry flows only.  Noise is re-sampled
between the discriminator update and the generator update of every step.

Partition rotation mirrors deployment: a policy is always trained on
different pages/instances than the ones it defends.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .datasets import partition
from .neuralcore import (
    EmbedderNet,
    FCDiscriminatorNet,
    GeneratorNet,
    NonFiniteError,
    WFDiscriminatorNet,
    clamped_bce,
    embedding_distance_loss,
    generate_padding,
    triplet_loss,
)
from .scheduler import DefenseConfig, defend_corpus
from .traces import ConfigError, Trace

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    """Optimization settings shared by all phases (Adam throughout)."""

    learning_rate: float = 1e-4
    batch_size: int = 40
    embedder_epochs: int = 30
    adversarial_epochs: int = 90
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_learning_rate: float = 1e-6
    margin: float = 1.0
    seed: int = 0
    # Generator-side learning rate for the adversarial phases; None means
    # the shared ``learning_rate``.  Running the generator faster than the
    # discriminator keeps the discriminator lagging, which favors the
    # high-variability padding equilibrium on small corpora.
    generator_lr: float | None = None

    def __post_init__(self) -> None:
        for name in ("learning_rate", "batch_size", "embedder_epochs",
                     "adversarial_epochs", "plateau_patience", "plateau_factor",
                     "min_learning_rate", "margin"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.generator_lr is not None and self.generator_lr <= 0:
            raise ConfigError("generator_lr must be positive")


@dataclass
class FlowPair:
    """An entry-side and exit-side flow; matched means same underlying flow."""

    entry: Trace
    exit: Trace
    matched: bool


def _validate_labeled(y: np.ndarray) -> None:
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ConfigError(
            "embedder training needs >= 2 classes with >= 2 instances each"
        )


def _stratified_split(y: np.ndarray, rng, val_frac: float = 0.2):
    """Per-class split; both sides keep >= 2 instances whenever possible
    so each can furnish (anchor, positive) pairs."""
    train_idx, val_idx = [], []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(val_frac * len(members))))
        if len(members) >= 4:
            n_val = min(len(members) - 2, max(2, n_val))
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    return np.array(sorted(train_idx)), np.array(sorted(val_idx))


def _sample_triplets(y: np.ndarray, pool: np.ndarray, rng, count: int):
    """Indices (anchor, positive, negative) drawn from ``pool``.

    If the anchor is its class's only pool member the anchor doubles as its
    positive (zero anchor-positive distance), so degenerate splits still
    yield a defined loss.
    """
    y_pool = y[pool]
    anchors = rng.integers(0, len(pool), size=count)
    pos = np.empty(count, dtype=np.int64)
    neg = np.empty(count, dtype=np.int64)
    for i, a in enumerate(anchors):
        same = np.flatnonzero(y_pool == y_pool[a])
        same = same[same != a]
        pos[i] = same[rng.integers(0, len(same))] if len(same) else a
        diff = np.flatnonzero(y_pool != y_pool[a])
        neg[i] = diff[rng.integers(0, len(diff))]
    return pool[anchors], pool[pos], pool[neg]


def train_embedder(X: np.ndarray, y: np.ndarray, cfg: TrainingConfig):
    """Triplet-loss embedder on binned traces; returns (EmbedderNet, history).

    Per batch, anchors and positives share a class and negatives differ;
    the mean margin loss is minimized with Adam under a plateau-based
    learning-rate schedule evaluated on a fixed validation triplet set.
    history["val_loss"][0] is the untrained baseline.
    """
    _validate_labeled(y)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    train_idx, val_idx = _stratified_split(y, rng)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    E = EmbedderNet()
    opt = torch.optim.Adam(E.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor,
        patience=cfg.plateau_patience, min_lr=cfg.min_learning_rate,
    )

    val_trips = _sample_triplets(y, val_idx, rng, count=max(200, len(val_idx)))

    def val_loss() -> float:
        E.eval()
        with torch.no_grad():
            a, p, n = (E(Xt[i]) for i in val_trips)
            return float(triplet_loss(a, p, n, cfg.margin))

    history = {"train_loss": [], "val_loss": [val_loss()], "lr": []}
    steps = max(1, len(train_idx) // cfg.batch_size)
    for epoch in range(cfg.embedder_epochs):
        E.train()
        epoch_losses = []
        for _ in range(steps):
            ia, ip, in_ = _sample_triplets(y, train_idx, rng, cfg.batch_size)
            loss = triplet_loss(E(Xt[ia]), E(Xt[ip]), E(Xt[in_]), cfg.margin)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"embedder loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        v = val_loss()
        sched.step(v)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(v)
        history["lr"].append(opt.param_groups[0]["lr"])
        logger.info("embedder epoch %d train %.4f val %.4f", epoch, history["train_loss"][-1], v)
    E.eval()
    return E, history


def embed(E: EmbedderNet, X: np.ndarray, batch: int = 256) -> np.ndarray:
    """Embed rows of X without gradients."""
    E.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(X), batch):
            out.append(E(torch.as_tensor(X[i : i + batch], dtype=torch.float32)).numpy())
    return np.concatenate(out) if out else np.empty((0, 256), dtype=np.float32)


def nearest_centroid_accuracy(
    E: EmbedderNet, X_train, y_train, X_test, y_test
) -> float:
    """Classify held-out traces by the nearest class centroid in embedding space."""
    emb_train = embed(E, X_train)
    emb_test = embed(E, X_test)
    classes = np.unique(y_train)
    centroids = np.stack([emb_train[y_train == c].mean(axis=0) for c in classes])
    d = np.linalg.norm(emb_test[:, None, :] - centroids[None, :, :], axis=-1)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == y_test))


def _fresh_noise(rng, batch: int, steps: int, dim: int) -> torch.Tensor:
    return torch.as_tensor(
        rng.standard_normal((batch, steps, dim)), dtype=torch.float32
    )


def _first_bins(rng, batch: int, dcfg: DefenseConfig) -> torch.Tensor:
    return torch.as_tensor(
        rng.integers(0, dcfg.first_bin_max + 1, size=batch), dtype=torch.float32
    )


def train_wf_adversarial(
    X: np.ndarray,
    y: np.ndarray,
    E: EmbedderNet,
    cfg: TrainingConfig,
    dcfg: DefenseConfig,
):
    """Adversarial phase against the embedding-prediction discriminator.

    Per step: (i) with frozen generator outputs, update D to minimize the
    mean embedding-prediction distance L_d on defended traces; (ii) with
    freshly sampled noise, update G to maximize that distance (L_g = -L_d).
    The embedder is frozen throughout (its targets are precomputed).
    Returns (G, D, history).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    targets = torch.as_tensor(embed(E, X), dtype=torch.float32)

    G = GeneratorNet(noise_dim=dcfg.noise_dim)
    D = WFDiscriminatorNet()
    opt_g = torch.optim.Adam([p for p in G.parameters() if p.requires_grad],
                             lr=cfg.generator_lr or cfg.learning_rate)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate)

    n, L = X.shape
    steps = max(1, n // cfg.batch_size)
    history = {"L_d": [], "L_g": [], "noise_pairs": []}
    for epoch in range(cfg.adversarial_epochs):
        for step in range(steps):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            x = Xt[idx]
            t = targets[idx]

            # discriminator update on the current policy's padding
            z_d = _fresh_noise(rng, len(idx), L - 1, dcfg.noise_dim)
            with torch.no_grad():
                dummy = generate_padding(G, x, z_d, dcfg, _first_bins(rng, len(idx), dcfg))
            l_d = embedding_distance_loss(D(x + dummy), t)
            if not torch.isfinite(l_d):
                raise NonFiniteError(f"L_d non-finite at epoch {epoch} step {step}")
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()

            # generator update with re-sampled noise
            z_g = _fresh_noise(rng, len(idx), L - 1, dcfg.noise_dim)
            dummy = generate_padding(G, x, z_g, dcfg, _first_bins(rng, len(idx), dcfg))
            for p in D.parameters():
                p.requires_grad_(False)
            l_g = -embedding_distance_loss(D(x + dummy), t)
            if not torch.isfinite(l_g):
                raise NonFiniteError(f"L_g non-finite at epoch {epoch} step {step}")
            opt_g.zero_grad()
            l_g.backward()
            opt_g.step()
            for p in D.parameters():
                p.requires_grad_(True)

            history["L_d"].append(float(l_d.detach()))
            history["L_g"].append(float(l_g.detach()))
            if len(history["noise_pairs"]) < 8:
                history["noise_pairs"].append(
                    (float(z_d.abs().sum()), float(z_g.abs().sum()))
                )
        logger.info(
            "wf adversarial epoch %d L_d %.4f", epoch, float(np.mean(history["L_d"][-steps:]))
        )
    G.eval()
    D.eval()
    return G, D, history


def train_fc_adversarial(
    entry_X: np.ndarray,
    exit_X: np.ndarray,
    cfg: TrainingConfig,
    dcfg: DefenseConfig,
):
    """Adversarial phase against the flow-matching discriminator.

    ``entry_X[i]`` and ``exit_X[i]`` are the binned sides of the same flow.
    Each step samples a half-matched/half-shuffled batch, updates D on the
    clamped binary cross-entropy, then (with re-sampled noise) updates G to
    maximize it.  Only entry flows receive padding.  Returns (G, D, history).
    """
    if len(entry_X) != len(exit_X):
        raise ConfigError("entry/exit flow counts differ")
    if len(entry_X) < 4:
        raise ConfigError("need at least 4 flows for matched/unmatched batches")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    entries = torch.as_tensor(entry_X, dtype=torch.float32)
    exits = torch.as_tensor(exit_X, dtype=torch.float32)

    G = GeneratorNet(noise_dim=dcfg.noise_dim)
    D = FCDiscriminatorNet()
    opt_g = torch.optim.Adam([p for p in G.parameters() if p.requires_grad],
                             lr=cfg.generator_lr or cfg.learning_rate)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate)

    n, L = entry_X.shape
    half = max(1, cfg.batch_size // 2)
    steps = max(1, n // cfg.batch_size)

    def sample_batch():
        """50% matched pairs, 50% derangement-mismatched pairs."""
        m_idx = rng.choice(n, size=half, replace=False)
        u_entry = rng.choice(n, size=half, replace=False)
        shift = int(rng.integers(1, n))
        u_exit = (u_entry + shift) % n
        e_idx = np.concatenate([m_idx, u_entry])
        x_idx = np.concatenate([m_idx, u_exit])
        labels = torch.cat([torch.ones(half), torch.zeros(half)])
        return e_idx, x_idx, labels

    history = {"L_d": [], "L_g": [], "noise_pairs": []}
    for epoch in range(cfg.adversarial_epochs):
        for step in range(steps):
            e_idx, x_idx, yb = sample_batch()
            e = entries[e_idx]
            x = exits[x_idx]

            z_d = _fresh_noise(rng, len(e_idx), L - 1, dcfg.noise_dim)
            with torch.no_grad():
                dummy = generate_padding(G, e, z_d, dcfg, _first_bins(rng, len(e_idx), dcfg))
            l_d = clamped_bce(D(e + dummy, x), yb)
            if not torch.isfinite(l_d):
                raise NonFiniteError(f"FC L_d non-finite at epoch {epoch} step {step}")
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()

            z_g = _fresh_noise(rng, len(e_idx), L - 1, dcfg.noise_dim)
            dummy = generate_padding(G, e, z_g, dcfg, _first_bins(rng, len(e_idx), dcfg))
            for p in D.parameters():
                p.requires_grad_(False)
            l_g = -clamped_bce(D(e + dummy, x), yb)
            if not torch.isfinite(l_g):
                raise NonFiniteError(f"FC L_g non-finite at epoch {epoch} step {step}")
            opt_g.zero_grad()
            l_g.backward()
            opt_g.step()
            for p in D.parameters():
                p.requires_grad_(True)

            history["L_d"].append(float(l_d.detach()))
            history["L_g"].append(float(l_g.detach()))
            if len(history["noise_pairs"]) < 8:
                history["noise_pairs"].append(
                    (float(z_d.abs().sum()), float(z_g.abs().sum()))
                )
        logger.info(
            "fc adversarial epoch %d L_d %.4f", epoch, float(np.mean(history["L_d"][-steps:]))
        )
    G.eval()
    D.eval()
    return G, D, history


def rotate_partitions(traces, trainer, n: int = 5, seed: int = 0):
    """Defend a corpus so no trace is defended by a policy trained on it.

    The corpus is split into n class-stratified partitions; rotation r
    trains on n-2 of them, validates on one, and defends the held-out one.
    ``trainer(train_traces, val_traces, rotation)`` must return a
    (GeneratorNet, DefenseConfig) pair.  Returns (defended, info); each
    entry of ``info["rotations"]`` keeps its trained generator, config,
    and defended partition so callers can re-defend at other budgets
    without retraining.
    """
    if n < 3:
        raise ConfigError("partition rotation needs n >= 3")
    parts = partition(traces, n, seed)
    defended = []
    info = {"n": n, "seed": seed, "rotations": []}
    for r in range(n):
        defend_part = parts[r]
        val_part = parts[(r + 1) % n]
        train_traces = [
            tr for j, p in enumerate(parts) if j not in (r, (r + 1) % n) for tr in p
        ]
        G, dcfg = trainer(train_traces, val_part, r)
        defended.extend(defend_corpus(defend_part, G, dcfg, seed=seed * 1009 + r))
        info["rotations"].append(
            {
                "rotation": r,
                "defend": sorted((tr.label, tr.instance) for tr in defend_part),
                "validate": sorted((tr.label, tr.instance) for tr in val_part),
                "train_size": len(train_traces),
                "generator": G,
                "config": dcfg,
                "defend_traces": defend_part,
            }
        )
        logger.info("rotation %d defended %d traces", r, len(defend_part))
    return defended, info
