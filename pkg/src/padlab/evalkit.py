"""Attack-based evaluation: closed-world fingerprinting classifiers, a
binned-representation classifier, flow-correlation ROC analysis, and the
10x-retraining countermeasure.

The fingerprinting attacker is a convolutional classifier over the first
``input_len`` packet directions (or direction-times-timestamp products),
trained per fold with early stopping; defenses are scored by the drop in
its closed-world accuracy.  The flow-correlation attacker is a freshly
trained flow-matching discriminator; it is scored by a threshold-sweep ROC
over all entry/exit combinations of the test flows.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .datasets import binned_dataset
from .neuralcore import FCDiscriminatorNet, _ConvBlock, clamped_bce
from .scheduler import DefenseConfig, defend_trace_offline
from .traces import ConfigError, make_bin_edges

logger = logging.getLogger(__name__)

VARIANTS = ("direction", "directional-timing", "binned")


@dataclass
class AttackConfig:
    """Attack-protocol settings, echoed into every result for the record."""

    input_len: int = 10_000
    epochs: int = 100
    patience: int = 10
    folds: int = 5
    batch_size: int = 128
    learning_rate: float = 2e-3
    val_frac: float = 0.1
    variant: str = "direction"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("input_len", "epochs", "patience", "folds", "batch_size",
                     "learning_rate", "val_frac"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")


@dataclass
class AttackResult:
    """Closed-world accuracy, per fold and aggregated."""

    fold_accuracies: list
    config: AttackConfig
    n_classes: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies))


@dataclass
class RocCurve:
    """Threshold-sweep ROC; one (threshold, TPR, FPR) triple per row."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    degenerate: bool = False

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))

    def tpr_at_fpr(self, target: float) -> float:
        """Highest TPR attainable while keeping FPR <= target."""
        ok = self.fpr <= target
        return float(self.tpr[ok].max()) if ok.any() else 0.0


class SequenceClassifier(nn.Module):
    """Convolutional closed-world classifier over fixed-length inputs.

    Same block structure as the evaluation networks (kernel-8 convolutions,
    batch norm, leaky ReLU, max pooling), with pool strides picked by input
    length so the head stays small from 256-bin vectors up to 10,000-packet
    sequences.
    """

    def __init__(self, input_len: int, n_classes: int):
        super().__init__()
        if input_len < 64:
            raise ConfigError("classifier input must be at least 64 long")
        pools = (8, 8, 4, 4) if input_len >= 2048 else (4, 4, 2, 2)
        chans = (16, 32, 64, 128)
        blocks, n, prev = [], input_len, 1
        for c, p in zip(chans, pools):
            blocks.append(_ConvBlock(prev, c, pool=p, stride=p))
            n = (n + 1) // p
            prev = c
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(prev * n, 256),
            nn.ReLU(),
            nn.Dropout(0.3),
            nn.Linear(256, n_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.blocks(x.unsqueeze(1)))


def attack_features(traces, cfg: AttackConfig, edges=None):
    """(X, y) arrays for the chosen input variant.

    direction: the first input_len signed packet directions, zero padded.
    directional-timing: direction times seconds-since-first-packet.
    binned: download volumes over the geometric bins.
    Labels of unlabeled traces come through as -1.
    """
    if cfg.variant == "binned":
        return binned_dataset(traces, edges or make_bin_edges())
    rows, labels = [], []
    for tr in traces:
        vals = tr.dirs.astype(np.float32)
        if cfg.variant == "directional-timing":
            vals = vals * (tr.times - tr.times[0]).astype(np.float32)
        row = np.zeros(cfg.input_len, dtype=np.float32)
        n = min(len(vals), cfg.input_len)
        row[:n] = vals[:n]
        rows.append(row)
        labels.append(tr.label if tr.label is not None else -1)
    return np.asarray(rows, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def _stratified_folds(y: np.ndarray, k: int, rng) -> list:
    """Round-robin fold assignment after a seeded per-class shuffle."""
    classes, counts = np.unique(y, return_counts=True)
    thin = classes[counts < k]
    if len(thin):
        raise ConfigError(
            f"classes {thin.tolist()} have fewer than {k} instances"
        )
    folds = [[] for _ in range(k)]
    for c in classes:
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(len(members))]
        for slot, idx in enumerate(members):
            folds[slot % k].append(idx)
    return [np.array(sorted(f)) for f in folds]


def _fit_classifier(X, y, train_idx, val_idx, n_classes, cfg: AttackConfig, seed: int):
    """Train one classifier with early stopping on validation accuracy."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SequenceClassifier(X.shape[1], n_classes)
    opt = torch.optim.Adamax(model.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    Xt = torch.as_tensor(X, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.int64)
    X_val, y_val = Xt[val_idx], yt[val_idx]

    best_acc, best_state, since_best = -1.0, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), cfg.batch_size):
            idx = train_idx[order[start : start + cfg.batch_size]]
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            loss = loss_fn(model(Xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            acc = float((model(X_val).argmax(1) == y_val).float().mean())
        if acc > best_acc:
            best_acc, since_best = acc, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def _accuracy(model, X, y, batch: int = 256) -> float:
    Xt = torch.as_tensor(X, dtype=torch.float32)
    hits = 0
    with torch.no_grad():
        for i in range(0, len(X), batch):
            hits += int((model(Xt[i : i + batch]).argmax(1).numpy() == y[i : i + batch]).sum())
    return hits / len(y)


def _carve_val(y: np.ndarray, pool: np.ndarray, frac: float, rng):
    """Split ``pool`` into (train, val) keeping >= 1 of each class in val."""
    val = []
    for c in np.unique(y[pool]):
        members = pool[y[pool] == c]
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(frac * len(members))))
        val.extend(members[:n_val])
    val = np.array(sorted(val))
    train = np.setdiff1d(pool, val)
    return train, val


def _relabel(y: np.ndarray):
    classes = np.unique(y)
    lut = {c: i for i, c in enumerate(classes)}
    return np.array([lut[v] for v in y], dtype=np.int64), classes


def wf_attack(train, test=None, cfg: AttackConfig | None = None, edges=None) -> AttackResult:
    """Closed-world fingerprinting accuracy of the convolutional attacker.

    With ``test=None``, runs stratified k-fold cross-validation over
    ``train`` (the result carries per-fold accuracies); otherwise fits once
    on ``train`` and scores ``test``.  Early stopping always uses a
    validation slice carved from the training side, never the test fold.
    """
    cfg = cfg or AttackConfig()
    X_tr, y_tr_raw = attack_features(train, cfg, edges)
    y_tr, classes = _relabel(y_tr_raw)
    n_classes = len(classes)
    if n_classes < 2:
        raise ConfigError("attack needs at least 2 classes")

    if test is not None:
        X_te, y_te_raw = attack_features(test, cfg, edges)
        unseen = set(y_te_raw) - set(classes)
        if unseen:
            raise ConfigError(f"test labels {sorted(unseen)} never seen in training")
        y_te = np.array([np.flatnonzero(classes == v)[0] for v in y_te_raw])
        rng = np.random.default_rng(cfg.seed)
        tr_idx, val_idx = _carve_val(y_tr, np.arange(len(y_tr)), cfg.val_frac, rng)
        model = _fit_classifier(X_tr, y_tr, tr_idx, val_idx, n_classes, cfg, cfg.seed)
        return AttackResult([_accuracy(model, X_te, y_te)], cfg, n_classes)

    rng = np.random.default_rng(cfg.seed)
    folds = _stratified_folds(y_tr, cfg.folds, rng)
    accs = []
    for f, test_idx in enumerate(folds):
        pool = np.concatenate([folds[j] for j in range(cfg.folds) if j != f])
        fold_rng = np.random.default_rng([cfg.seed, f])
        tr_idx, val_idx = _carve_val(y_tr, pool, cfg.val_frac, fold_rng)
        model = _fit_classifier(
            X_tr, y_tr, tr_idx, val_idx, n_classes, cfg, cfg.seed * 1000 + f
        )
        accs.append(_accuracy(model, X_tr[test_idx], y_tr[test_idx]))
        logger.info("fold %d accuracy %.3f", f, accs[-1])
    return AttackResult(accs, cfg, n_classes)


def binned_attack(train, test=None, cfg: AttackConfig | None = None, edges=None) -> AttackResult:
    """wf_attack over the 256-bin download-volume representation."""
    cfg = dataclasses.replace(cfg, variant="binned") if cfg else AttackConfig(variant="binned")
    return wf_attack(train, test, cfg, edges)


# ------------------------------------------------------------- correlation


def build_roc(scores, labels) -> RocCurve:
    """ROC by sweeping a decision threshold down through the scores.

    Point i predicts "matched" for every score >= thresholds[i]; TPR and
    FPR are therefore non-decreasing along the sweep and the endpoints
    (0,0) and (1,1) are always present.  A constant score vector is flagged
    degenerate (the curve collapses to the diagonal's endpoints).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if len(scores) != len(labels) or len(scores) == 0:
        raise ConfigError("scores and labels must be equal-length and non-empty")
    if not labels.any() or labels.all():
        raise ConfigError("need both matched and unmatched examples")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(labels[order])
    fp = np.cumsum(~labels[order])
    # collapse ties: keep the last row of each distinct score
    last = np.flatnonzero(np.diff(sorted_scores, append=-np.inf))
    thresholds = np.concatenate([[np.inf], sorted_scores[last]])
    tpr = np.concatenate([[0.0], tp[last] / labels.sum()])
    fpr = np.concatenate([[0.0], fp[last] / (~labels).sum()])
    degenerate = len(np.unique(scores)) == 1
    if degenerate:
        logger.warning("degenerate score distribution: all %d scores equal", len(scores))
    return RocCurve(thresholds=thresholds, tpr=tpr, fpr=fpr, degenerate=degenerate)


def _score_pair_grid(D: FCDiscriminatorNet, entry_X, exit_X, batch: int = 4096):
    """Scores and match labels for every entry x exit combination."""
    n = len(entry_X)
    ei, xi = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ei, xi = ei.ravel(), xi.ravel()
    entries = torch.as_tensor(entry_X, dtype=torch.float32)
    exits = torch.as_tensor(exit_X, dtype=torch.float32)
    scores = np.empty(len(ei), dtype=np.float64)
    D.eval()
    with torch.no_grad():
        for i in range(0, len(ei), batch):
            s = D(entries[ei[i : i + batch]], exits[xi[i : i + batch]])
            scores[i : i + batch] = s.numpy()
    return scores, ei == xi


def fc_attack_eval(train_pairs, test_pairs, cfg: AttackConfig | None = None) -> RocCurve:
    """ROC of a freshly trained flow-matching attacker.

    ``train_pairs`` and ``test_pairs`` are (entry_X, exit_X) arrays of
    matched flows, disjoint from each other.  The attacker trains on
    half-matched/half-shuffled batches with clamped binary cross-entropy
    and early stopping on held-out matched pairs, then scores every
    entry x exit combination of the test flows.
    """
    cfg = cfg or AttackConfig()
    entry_tr, exit_tr = (np.asarray(a, dtype=np.float32) for a in train_pairs)
    entry_te, exit_te = (np.asarray(a, dtype=np.float32) for a in test_pairs)
    if len(entry_tr) != len(exit_tr) or len(entry_te) != len(exit_te):
        raise ConfigError("entry/exit flow counts differ")
    if len(entry_tr) < 4 or len(entry_te) < 2:
        raise ConfigError("too few flow pairs")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = len(entry_tr)
    n_val = max(2, int(round(cfg.val_frac * n)))
    val_idx = rng.permutation(n)[:n_val]
    fit_idx = np.setdiff1d(np.arange(n), val_idx)

    D = FCDiscriminatorNet()
    opt = torch.optim.Adamax(D.parameters(), lr=cfg.learning_rate)
    entries = torch.as_tensor(entry_tr)
    exits = torch.as_tensor(exit_tr)
    half = max(1, cfg.batch_size // 2)

    def batch_loss(idx_pool):
        m = idx_pool[rng.integers(0, len(idx_pool), half)]
        u_e = idx_pool[rng.integers(0, len(idx_pool), half)]
        shift = int(rng.integers(1, len(idx_pool)))
        u_x = idx_pool[(np.searchsorted(idx_pool, u_e) + shift) % len(idx_pool)]
        e = torch.cat([entries[m], entries[u_e]])
        x = torch.cat([exits[m], exits[u_x]])
        yb = torch.cat([torch.ones(half), torch.zeros(half)])
        return clamped_bce(D(e, x), yb)

    # fixed balanced validation block: every matched val pair plus one
    # mismatched partner each
    v_shift = 1 + int(rng.integers(0, max(1, n_val - 1)))
    val_e = torch.cat([entries[val_idx], entries[val_idx]])
    val_x = torch.cat([exits[val_idx], exits[val_idx[(np.arange(n_val) + v_shift) % n_val]]])
    val_y = torch.cat([torch.ones(n_val), torch.zeros(n_val)])

    best_loss, best_state, since_best = np.inf, None, 0
    steps = max(1, len(fit_idx) // half)
    for epoch in range(cfg.epochs):
        D.train()
        for _ in range(steps):
            loss = batch_loss(fit_idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
        D.eval()
        with torch.no_grad():
            v = float(clamped_bce(D(val_e, val_x), val_y))
        if v < best_loss - 1e-6:
            best_loss, since_best = v, 0
            best_state = copy.deepcopy(D.state_dict())
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    if best_state is not None:
        D.load_state_dict(best_state)

    scores, labels = _score_pair_grid(D, entry_te, exit_te)
    return build_roc(scores, labels)


# ------------------------------------------------------------ augmentation


def tenx_augment(traces, G, dcfg: DefenseConfig, k: int = 10, seed: int = 0):
    """k independently padded variants of every trace, labels preserved.

    Each variant draws fresh noise from its own stream, so an attacker
    training on the output sees k distinct defended versions per trace.
    """
    out = []
    for tr in traces:
        label = tr.label if tr.label is not None else -1
        instance = tr.instance if tr.instance is not None else 0
        for v in range(k):
            rng = np.random.default_rng([seed, label, instance, v])
            out.append(defend_trace_offline(tr, G, dcfg, rng))
    return out
