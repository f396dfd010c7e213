"""Training-loop tests: embedder pretraining, both adversarial phases,
and partition rotation.  Configurations here are deliberately tiny; the
full-scale behavior criteria live in the acceptance suite."""

import numpy as np
import pytest
import torch

from padlab.datasets import binned_dataset, partition, synth_corpus, synth_flows
from padlab.neuralcore import EmbedderNet, GeneratorNet, NonFiniteError, WFDiscriminatorNet
from padlab.scheduler import DefenseConfig
from padlab.traces import ConfigError, make_bin_edges
from padlab.training import (
    TrainingConfig,
    nearest_centroid_accuracy,
    rotate_partitions,
    train_embedder,
    train_fc_adversarial,
    train_wf_adversarial,
)

EDGES = make_bin_edges()


def tiny_dataset(classes=3, instances=4, seed=23):
    corpus = synth_corpus(classes, instances, seed=seed)
    return binned_dataset(corpus.traces, EDGES)


def tiny_cfg(**kw):
    defaults = dict(batch_size=8, embedder_epochs=3, adversarial_epochs=2, seed=1)
    defaults.update(kw)
    return TrainingConfig(**defaults)


def tiny_dcfg():
    return DefenseConfig(N_download=200.0)


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainingConfig(batch_size=-1)


# ----------------------------------------------------------------- embedder


def test_train_embedder_loss_drops_and_separates():
    X, y = tiny_dataset(classes=4, instances=6)
    E, history = train_embedder(X, y, tiny_cfg(embedder_epochs=8))
    assert len(history["val_loss"]) == 9  # untrained baseline + one per epoch
    assert history["val_loss"][-1] < history["val_loss"][0]
    assert all(np.isfinite(history["train_loss"]))
    acc = nearest_centroid_accuracy(E, X, y, X, y)
    assert acc > 0.5  # resubstitution floor for a smoke-scale run


def test_train_embedder_needs_multiple_classes():
    X, y = tiny_dataset(classes=2, instances=4)
    with pytest.raises(ConfigError):
        train_embedder(X, np.zeros_like(y), tiny_cfg())


def test_train_embedder_deterministic():
    X, y = tiny_dataset()
    E1, h1 = train_embedder(X, y, tiny_cfg(embedder_epochs=2))
    E2, h2 = train_embedder(X, y, tiny_cfg(embedder_epochs=2))
    assert h1["val_loss"] == h2["val_loss"]
    for k, v in E1.state_dict().items():
        assert torch.equal(v, E2.state_dict()[k])


# -------------------------------------------------------- WF adversarial


def frozen_embedder(X, y):
    E, _ = train_embedder(X, y, tiny_cfg(embedder_epochs=1))
    return E


def test_wf_adversarial_runs_and_leaves_embedder_untouched():
    X, y = tiny_dataset(classes=2, instances=4)
    E = frozen_embedder(X, y)
    before = {k: v.clone() for k, v in E.state_dict().items()}
    G, D, history = train_wf_adversarial(X, y, E, tiny_cfg(), tiny_dcfg())
    assert isinstance(G, GeneratorNet) and isinstance(D, WFDiscriminatorNet)
    assert len(history["L_d"]) == len(history["L_g"]) == 2  # 8 traces / batch 8 * 2 epochs
    assert all(np.isfinite(history["L_d"]))
    for k, v in E.state_dict().items():
        assert torch.equal(v, before[k]), "frozen embedder was modified"


def test_wf_adversarial_resamples_noise_between_updates():
    X, y = tiny_dataset(classes=2, instances=4)
    E = frozen_embedder(X, y)
    _, _, history = train_wf_adversarial(X, y, E, tiny_cfg(), tiny_dcfg())
    assert history["noise_pairs"], "no noise draws recorded"
    for d_draw, g_draw in history["noise_pairs"]:
        assert d_draw != g_draw


def test_wf_adversarial_updates_both_networks():
    X, y = tiny_dataset(classes=2, instances=4)
    E = frozen_embedder(X, y)
    cfg = tiny_cfg()
    # the trainer seeds torch then builds G, D in this order
    torch.manual_seed(cfg.seed)
    G0, D0 = GeneratorNet(noise_dim=tiny_dcfg().noise_dim), WFDiscriminatorNet()
    G, D, _ = train_wf_adversarial(X, y, E, cfg, tiny_dcfg())
    assert any(
        not torch.equal(p, q) for p, q in zip(G0.state_dict().values(), G.state_dict().values())
    )
    assert any(
        not torch.equal(p, q) for p, q in zip(D0.state_dict().values(), D.state_dict().values())
    )


def test_wf_adversarial_deterministic():
    X, y = tiny_dataset(classes=2, instances=4)
    E = frozen_embedder(X, y)
    G1, _, h1 = train_wf_adversarial(X, y, E, tiny_cfg(), tiny_dcfg())
    G2, _, h2 = train_wf_adversarial(X, y, E, tiny_cfg(), tiny_dcfg())
    assert h1["L_d"] == h2["L_d"]
    for k, v in G1.state_dict().items():
        assert torch.equal(v, G2.state_dict()[k])


def test_wf_adversarial_flags_nonfinite_losses():
    X, y = tiny_dataset(classes=2, instances=4)
    E = frozen_embedder(X, y)
    X_bad = X.copy()
    X_bad[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        train_wf_adversarial(X_bad, y, E, tiny_cfg(), tiny_dcfg())


# -------------------------------------------------------- FC adversarial


def flow_arrays(n=8, seed=29):
    pairs = synth_flows(n, seed=seed)
    entry_X, _ = binned_dataset([e for e, _ in pairs], EDGES)
    exit_X, _ = binned_dataset([x for _, x in pairs], EDGES)
    return entry_X, exit_X


def test_fc_adversarial_runs():
    entry_X, exit_X = flow_arrays()
    G, D, history = train_fc_adversarial(entry_X, exit_X, tiny_cfg(), tiny_dcfg())
    assert len(history["L_d"]) == 2
    assert all(np.isfinite(history["L_d"])) and all(np.isfinite(history["L_g"]))
    for d_draw, g_draw in history["noise_pairs"]:
        assert d_draw != g_draw
    # binary cross-entropy on probabilities stays in its clamped range
    assert all(0.0 < v < 20.0 for v in history["L_d"])


def test_fc_adversarial_validates_inputs():
    entry_X, exit_X = flow_arrays()
    with pytest.raises(ConfigError, match="counts differ"):
        train_fc_adversarial(entry_X[:4], exit_X, tiny_cfg(), tiny_dcfg())
    with pytest.raises(ConfigError, match="at least 4"):
        train_fc_adversarial(entry_X[:2], exit_X[:2], tiny_cfg(), tiny_dcfg())


def test_fc_adversarial_deterministic():
    entry_X, exit_X = flow_arrays()
    G1, _, h1 = train_fc_adversarial(entry_X, exit_X, tiny_cfg(), tiny_dcfg())
    G2, _, h2 = train_fc_adversarial(entry_X, exit_X, tiny_cfg(), tiny_dcfg())
    assert h1["L_d"] == h2["L_d"]
    for k, v in G1.state_dict().items():
        assert torch.equal(v, G2.state_dict()[k])


# ------------------------------------------------------ partition rotation


def test_rotate_partitions_policy_never_sees_its_targets():
    corpus = synth_corpus(3, 6, seed=31)
    calls = []

    def trainer(train_traces, val_traces, rotation):
        calls.append(
            {
                "rotation": rotation,
                "train": {(t.label, t.instance) for t in train_traces},
                "val": {(t.label, t.instance) for t in val_traces},
            }
        )
        return GeneratorNet(), tiny_dcfg()

    defended, info = rotate_partitions(corpus.traces, trainer, n=3, seed=7)
    assert len(defended) == len(corpus)
    keys = [(d.label, d.instance) for d in defended]
    assert sorted(keys) == sorted((t.label, t.instance) for t in corpus)

    parts = partition(corpus.traces, 3, seed=7)
    part_keys = [{(t.label, t.instance) for t in p} for p in parts]
    for call, rot_info in zip(calls, info["rotations"]):
        r = call["rotation"]
        defended_keys = set(rot_info["defend"])
        assert defended_keys == part_keys[r]
        assert call["val"] == part_keys[(r + 1) % 3]
        assert call["train"] == set.union(*part_keys) - defended_keys - call["val"]
        assert not (call["train"] & defended_keys)
        assert isinstance(rot_info["generator"], GeneratorNet)
        assert {(t.label, t.instance) for t in rot_info["defend_traces"]} == defended_keys


def test_rotate_partitions_needs_three_parts():
    corpus = synth_corpus(2, 4, seed=31)
    with pytest.raises(ConfigError):
        rotate_partitions(corpus.traces, lambda *a: None, n=2, seed=0)
