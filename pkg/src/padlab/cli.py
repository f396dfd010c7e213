"""Command-line surface for the padding laboratory.

Subcommands cover the full pipeline: corpus synthesis, adversarial
training for both threat models, applying a trained policy (or the
Rayleigh baseline) to a corpus, attack-based evaluation, portable weights
export with golden test vectors, flow-correlation ROC runs, and the
overhead/accuracy tradeoff sweep.

Every run writes ``manifest.json`` into its output directory recording the
resolved parameters, tool version, and input digests, so any result can be
regenerated from the manifest alone.  Option precedence: command-line flag,
then ``--config`` file entry (flat ``key=value`` lines), then the built-in
default.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    Corpus,
    binned_dataset,
    load_corpus,
    load_defended_corpus,
    partition,
    save_corpus,
    save_defended_corpus,
    synth_corpus,
    synth_flows,
)
from .evalkit import AttackConfig, fc_attack_eval, wf_attack
from .neuralcore import (
    calibrate_live_norm,
    export_weights,
    import_weights,
    save_module_weights,
)
from .ratemeter import RateMeter
from .scheduler import (
    DefenseConfig,
    defend_corpus,
    front_baseline,
    generator_id,
    overhead_from_flags,
)
from .traces import ConfigError, make_bin_edges
from .training import train_embedder, train_fc_adversarial, train_wf_adversarial, TrainingConfig

logger = logging.getLogger(__name__)

WEIGHTS_NAME = "generator.padw"


# ----------------------------------------------------------- config/manifest


def read_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment, dashes equal underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _resolve(args, spec: dict) -> dict:
    """Merge flag values, config-file entries, and defaults."""
    cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    params = {}
    for name, (default, cast) in spec.items():
        val = getattr(args, name, None)
        if val is None and name in cfg:
            val = cast(cfg[name])
        params[name] = default if val is None else val
    return params


def _digest(path) -> str:
    """SHA-256 over a file, or over a directory's sorted names and bytes."""
    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, subcommand: str, params: dict, inputs: dict | None = None,
                   results: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "padlab",
        "version": __version__,
        "subcommand": subcommand,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "params": {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()},
        "inputs": {k: {"path": str(p), "sha256": _digest(p)} for k, p in (inputs or {}).items()},
    }
    if results:
        manifest["results"] = results
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_metrics(out_dir, records: list) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    (Path(out_dir) / "metrics.jsonl").write_text("\n".join(lines) + "\n")


def write_summary(out_dir, rows: list) -> None:
    """Fixed-width summary table: defense, overhead, attack, metric."""
    header = ("defense", "overhead", "attack", "metric", "value")
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(5)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = "\n".join(fmt.format(*map(str, r)) for r in [header] + rows)
    (Path(out_dir) / "summary.txt").write_text(text + "\n")


def write_plot_data(path, xs, ys, header: str) -> None:
    lines = [f"# {header}"] + [f"{x} {y}" for x, y in zip(xs, ys)]
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------- loading


def _load_any(directory):
    """(attack-ready traces, overhead report or None) from a corpus dir.

    Three-column files are defended traces (dummy flags present); the
    overhead report then comes from the flags.
    """
    directory = Path(directory)
    try:
        sample = next(p for p in sorted(directory.iterdir()) if p.is_file())
    except (StopIteration, FileNotFoundError):
        raise ConfigError(f"no trace files in {directory}")
    first_line = sample.read_text().split("\n", 1)[0]
    if len(first_line.split("\t")) >= 3:
        defendeds = load_defended_corpus(directory)
        return defendeds, overhead_from_flags(defendeds)
    return list(load_corpus(directory)), None


def _flow_pairs_from_dir(directory):
    entry = load_corpus(Path(directory) / "entry")
    exit_ = load_corpus(Path(directory) / "exit")
    by_instance = {tr.instance: tr for tr in exit_}
    pairs = []
    for e in entry:
        if e.instance not in by_instance:
            raise ConfigError(f"entry flow {e.instance} has no exit counterpart")
        pairs.append((e, by_instance[e.instance]))
    return pairs


def _defense_config(params) -> DefenseConfig:
    return DefenseConfig(
        N_download=float(params["n_download"]),
        upload_ratio=float(params["upload_ratio"]),
    )


def _training_config(params) -> TrainingConfig:
    return TrainingConfig(
        learning_rate=params["learning_rate"],
        batch_size=params["batch_size"],
        embedder_epochs=params["embedder_epochs"],
        adversarial_epochs=params["epochs"],
        generator_lr=params["generator_lr"],
        seed=params["seed"],
    )


def _attack_config(params, variant=None) -> AttackConfig:
    return AttackConfig(
        input_len=params["input_len"],
        epochs=params["attack_epochs"],
        patience=params["patience"],
        folds=params["folds"],
        batch_size=params["attack_batch_size"],
        learning_rate=params["attack_learning_rate"],
        variant=variant or params.get("variant", "direction"),
        seed=params["seed"],
    )


_TRAIN_SPEC = {
    "seed": (0, int),
    "n_download": (3000.0, float),
    "upload_ratio": (5.0, float),
    "epochs": (12, int),
    "embedder_epochs": (15, int),
    "batch_size": (40, int),
    "learning_rate": (1e-4, float),
    "generator_lr": (None, float),
}

_ATTACK_SPEC = {
    "input_len": (10_000, int),
    "attack_epochs": (60, int),
    "patience": (10, int),
    "folds": (5, int),
    "attack_batch_size": (128, int),
    "attack_learning_rate": (2e-3, float),
    "seed": (0, int),
}


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    params = _resolve(args, {
        "classes": (20, int),
        "instances": (50, int),
        "seed": (0, int),
        "volume_scale": (1.0, float),
        "flows": (0, int),
    })
    out = Path(args.out)
    if params["flows"]:
        pairs = synth_flows(params["flows"], params["seed"], params["volume_scale"])
        save_corpus(Corpus([e for e, _ in pairs], labeled=False), out / "entry")
        save_corpus(Corpus([x for _, x in pairs], labeled=False), out / "exit")
        n = len(pairs)
    else:
        corpus = synth_corpus(
            params["classes"], params["instances"], params["seed"], params["volume_scale"]
        )
        save_corpus(corpus, out)
        n = len(corpus)
    write_manifest(out, "synth", params, results={"traces": n})
    logger.info("wrote %d traces to %s", n, out)
    return 0


def cmd_train_wf(args) -> int:
    params = _resolve(args, _TRAIN_SPEC)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(args.corpus)
    dcfg = _defense_config(params)
    tcfg = _training_config(params)

    X, y = binned_dataset(corpus.traces, dcfg.edges)
    E, e_hist = train_embedder(X, y, tcfg)
    G, D, a_hist = train_wf_adversarial(X, y, E, tcfg, dcfg)

    dcfg = dataclasses.replace(
        dcfg, live_norm_Z=calibrate_live_norm(G, X, dcfg, seed=params["seed"])
    )
    export_weights(G, dcfg, out / WEIGHTS_NAME, run_hash=generator_id(G))
    save_module_weights(E, out / "embedder.ckpt", {"role": "embedder"})
    save_module_weights(D, out / "discriminator.ckpt", {"role": "wf-discriminator"})
    (out / "history.json").write_text(
        json.dumps({"embedder": e_hist, "adversarial": a_hist}, indent=2) + "\n"
    )
    write_manifest(out, "train-wf", params, inputs={"corpus": args.corpus},
                   results={"generator_id": generator_id(G)})
    return 0


def cmd_train_fc(args) -> int:
    params = _resolve(args, {**_TRAIN_SPEC, "flows": (200, int), "n_download": (1000.0, float)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.corpus:
        pairs = _flow_pairs_from_dir(args.corpus)
    else:
        pairs = synth_flows(params["flows"], params["seed"])
    dcfg = _defense_config(params)
    tcfg = _training_config(params)

    entry_X, _ = binned_dataset([e for e, _ in pairs], dcfg.edges)
    exit_X, _ = binned_dataset([x for _, x in pairs], dcfg.edges)
    G, D, history = train_fc_adversarial(entry_X, exit_X, tcfg, dcfg)

    dcfg = dataclasses.replace(
        dcfg, live_norm_Z=calibrate_live_norm(G, entry_X, dcfg, seed=params["seed"])
    )
    export_weights(G, dcfg, out / WEIGHTS_NAME, run_hash=generator_id(G))
    save_module_weights(D, out / "discriminator.ckpt", {"role": "fc-discriminator"})
    (out / "history.json").write_text(json.dumps({"adversarial": history}, indent=2) + "\n")
    inputs = {"corpus": args.corpus} if args.corpus else {}
    write_manifest(out, "train-fc", params, inputs=inputs,
                   results={"generator_id": generator_id(G)})
    return 0


def cmd_defend(args) -> int:
    params = _resolve(args, {"seed": (0, int)})
    out = Path(args.out)
    G, dcfg = import_weights(args.weights)
    corpus = load_corpus(args.corpus)
    defendeds = defend_corpus(corpus.traces, G, dcfg, seed=params["seed"])
    save_defended_corpus(defendeds, out)
    report = overhead_from_flags(defendeds)
    write_manifest(out, "defend", params,
                   inputs={"corpus": args.corpus, "weights": args.weights},
                   results={"traces": len(defendeds),
                            "bandwidth_overhead": report.bandwidth_oh})
    write_metrics(out, [{
        "kind": "defend", "defense": "adversarial", "traces": len(defendeds),
        "dummy_down": report.dummy_down, "dummy_up": report.dummy_up,
        "real_down": report.real_down, "real_up": report.real_up,
        "bandwidth_overhead": report.bandwidth_oh,
    }])
    return 0


def cmd_front(args) -> int:
    params = _resolve(args, {
        "seed": (0, int),
        "n_client": (4000, int),
        "n_server": (4000, int),
        "w_min": (1.0, float),
        "w_max": (14.0, float),
    })
    out = Path(args.out)
    corpus = load_corpus(args.corpus)
    defendeds = []
    for i, tr in enumerate(corpus):
        key = [params["seed"], tr.label if tr.label is not None else -1,
               tr.instance if tr.instance is not None else i]
        defendeds.append(front_baseline(
            tr, N_s=params["n_server"], N_c=params["n_client"],
            W_min=params["w_min"], W_max=params["w_max"],
            rng=np.random.default_rng(key),
        ))
    save_defended_corpus(defendeds, out)
    report = overhead_from_flags(defendeds)
    write_manifest(out, "front", params, inputs={"corpus": args.corpus},
                   results={"traces": len(defendeds),
                            "bandwidth_overhead": report.bandwidth_oh})
    write_metrics(out, [{
        "kind": "defend", "defense": "rayleigh-baseline", "traces": len(defendeds),
        "bandwidth_overhead": report.bandwidth_oh,
    }])
    return 0


def cmd_evaluate(args) -> int:
    params = _resolve(args, {**_ATTACK_SPEC, "variant": ("direction", str)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces, report = _load_any(args.corpus)
    test = None
    if args.test:
        test, _ = _load_any(args.test)
    acfg = _attack_config(params)
    result = wf_attack(traces, test=test, cfg=acfg)

    overhead = report.bandwidth_oh if report else 0.0
    defense = "defended" if report else "none"
    record = {
        "kind": "wf-attack", "defense": defense, "variant": acfg.variant,
        "overhead": overhead, "accuracy_mean": result.mean, "accuracy_std": result.std,
        "fold_accuracies": result.fold_accuracies, "classes": result.n_classes,
    }
    write_metrics(out, [record])
    write_summary(out, [(defense, f"{overhead:.3f}", f"wf-{acfg.variant}",
                         "accuracy", f"{result.mean:.4f}")])
    inputs = {"corpus": args.corpus}
    if args.test:
        inputs["test"] = args.test
    write_manifest(out, "evaluate", params, inputs=inputs,
                   results={"accuracy_mean": result.mean, "accuracy_std": result.std})
    print(f"accuracy {result.mean:.4f} +/- {result.std:.4f} ({acfg.variant}, {defense})")
    return 0


def cmd_export_weights(args) -> int:
    params = _resolve(args, {"golden": (False, _parse_bool), "steps": (32, int), "seed": (0, int)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    G, dcfg = import_weights(args.weights)  # validates container + shapes
    blob = Path(args.weights).read_bytes()
    (out / WEIGHTS_NAME).write_bytes(blob)

    if params["golden"]:
        _write_golden_vectors(out, G, dcfg, blob, params["steps"], params["seed"])
    write_manifest(out, "export-weights", params, inputs={"weights": args.weights},
                   results={"sha256": hashlib.sha256(blob).hexdigest()})
    return 0


def _write_golden_vectors(out: Path, G, dcfg, blob: bytes, n_steps: int, seed: int) -> None:
    """Reference vectors for cross-implementation equivalence tests."""
    rng = np.random.default_rng(seed)
    state = None
    steps = []
    t_feats = (dcfg.edges.starts[1:] / dcfg.edges.span).astype(np.float64)
    for i in range(n_steps):
        noise = rng.standard_normal(G.noise_dim)
        prev_vol = float(rng.integers(0, 200))
        t_feat = float(t_feats[i % len(t_feats)])
        state, raw = G.step(state, noise, prev_vol, t_feat)
        steps.append({
            "noise": noise.tolist(),
            "prev_vol": prev_vol,
            "t_feat": t_feat,
            "raw": raw,
        })
    (out / "golden_infer.json").write_text(json.dumps({
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
        "noise_dim": G.noise_dim,
        "tolerance": 1e-5,
        "steps": steps,
    }, indent=2) + "\n")

    meter = RateMeter(k=1.0)
    events = np.cumsum(rng.exponential(0.2, size=64)).tolist()
    reads = []
    for t in events:
        reads.append({"t": t, "before": meter.read(t)})
        meter.on_event(t)
        reads.append({"t": t, "after": meter.estimate})
    probe = events[-1] + 1.5
    reads.append({"t": probe, "before": meter.read(probe)})
    (out / "golden_ratemeter.json").write_text(json.dumps({
        "k": 1.0, "tolerance": 1e-9, "events": events, "reads": reads,
    }, indent=2) + "\n")


def cmd_roc(args) -> int:
    params = _resolve(args, {
        **_ATTACK_SPEC,
        "train_flows": (150, int),
        "test_flows": (50, int),
        "attack_epochs": (100, int),
        "attack_batch_size": (32, int),
        "attack_learning_rate": (1e-3, float),
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges = make_bin_edges()
    train_pairs = synth_flows(params["train_flows"], params["seed"])
    test_pairs = synth_flows(params["test_flows"], params["seed"] + 1)

    defense = "none"
    overhead = 0.0
    if args.weights:
        G, dcfg = import_weights(args.weights)
        defense = "adversarial"

        def defended_entries(pairs, tag):
            entries = [e for e, _ in pairs]
            defendeds = defend_corpus(entries, G, dcfg, seed=params["seed"] * 31 + tag)
            return defendeds

        train_def = defended_entries(train_pairs, 1)
        test_def = defended_entries(test_pairs, 2)
        overhead = overhead_from_flags(train_def + test_def).bandwidth_oh
        entry_tr, _ = binned_dataset(train_def, edges)
        entry_te, _ = binned_dataset(test_def, edges)
    else:
        entry_tr, _ = binned_dataset([e for e, _ in train_pairs], edges)
        entry_te, _ = binned_dataset([e for e, _ in test_pairs], edges)
    exit_tr, _ = binned_dataset([x for _, x in train_pairs], edges)
    exit_te, _ = binned_dataset([x for _, x in test_pairs], edges)

    acfg = _attack_config(params, variant="binned")
    roc = fc_attack_eval((entry_tr, exit_tr), (entry_te, exit_te), acfg)

    lines = ["# threshold tpr fpr"]
    lines += [f"{t} {tp} {fp}" for t, tp, fp in zip(roc.thresholds, roc.tpr, roc.fpr)]
    (out / "roc.tsv").write_text("\n".join(lines) + "\n")
    tprs = {f"tpr_at_{f:g}": roc.tpr_at_fpr(f) for f in (1e-1, 1e-2, 1e-3)}
    write_metrics(out, [{
        "kind": "fc-attack", "defense": defense, "overhead": overhead,
        "auc": roc.auc, "degenerate": roc.degenerate, **tprs,
    }])
    write_summary(out, [
        (defense, f"{overhead:.3f}", "fc-matching", "auc", f"{roc.auc:.4f}"),
        *[(defense, f"{overhead:.3f}", "fc-matching", k, f"{v:.4f}") for k, v in tprs.items()],
    ])
    inputs = {"weights": args.weights} if args.weights else {}
    write_manifest(out, "roc", params, inputs=inputs,
                   results={"auc": roc.auc, **tprs})
    print(f"auc {roc.auc:.4f} ({defense})")
    return 0


def cmd_tradeoff(args) -> int:
    params = _resolve(args, {
        **_TRAIN_SPEC, **_ATTACK_SPEC,
        "sweep": ("1000,3000,5000,7000", str),
        "seeds": ("0,1,2", str),
        "attack_epochs": (40, int),
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep = [float(v) for v in str(params["sweep"]).split(",") if v]
    seeds = [int(v) for v in str(params["seeds"]).split(",") if v]
    if not sweep or not seeds:
        raise ConfigError("sweep and seeds must be non-empty comma lists")

    corpus = load_corpus(args.corpus)
    edges = make_bin_edges()
    records = []
    for seed in seeds:
        parts = partition(corpus.traces, 5, seed)
        test_traces = parts[0]
        train_traces = [tr for p in parts[1:] for tr in p]
        X_tr, y_tr = binned_dataset(train_traces, edges)
        tcfg = _training_config({**params, "seed": seed})
        E, _ = train_embedder(X_tr, y_tr, tcfg)
        for n_download in sweep:
            dcfg = DefenseConfig(N_download=n_download, upload_ratio=params["upload_ratio"])
            G, _, _ = train_wf_adversarial(X_tr, y_tr, E, tcfg, dcfg)
            def_train = defend_corpus(train_traces, G, dcfg, seed=seed * 7 + 1)
            def_test = defend_corpus(test_traces, G, dcfg, seed=seed * 7 + 2)
            acfg = _attack_config({**params, "seed": seed})
            result = wf_attack(def_train, test=def_test, cfg=acfg)
            overhead = overhead_from_flags(def_train + def_test).bandwidth_oh
            records.append({
                "kind": "tradeoff-cell", "n_download": n_download, "seed": seed,
                "overhead": overhead, "accuracy": result.mean,
            })
            logger.info("N=%g seed=%d overhead=%.2f accuracy=%.3f",
                        n_download, seed, overhead, result.mean)

    rows, xs, ys = [], [], []
    for n_download in sweep:
        cells = [r for r in records if r["n_download"] == n_download]
        acc = float(np.median([c["accuracy"] for c in cells]))
        oh = float(np.median([c["overhead"] for c in cells]))
        records.append({"kind": "tradeoff-point", "n_download": n_download,
                        "overhead_median": oh, "accuracy_median": acc})
        rows.append(("adversarial", f"{oh:.3f}", "wf-direction", "accuracy", f"{acc:.4f}"))
        xs.append(oh)
        ys.append(acc)
    write_plot_data(out / "tradeoff.tsv", xs, ys, "bandwidth_overhead accuracy_median")
    write_metrics(out, records)
    write_summary(out, rows)
    write_manifest(out, "tradeoff", params, inputs={"corpus": args.corpus})
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p, *, corpus=False, out=True, weights=False):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    if corpus:
        p.add_argument("--in", dest="corpus", required=True, help="input corpus directory")
    if weights:
        p.add_argument("--weights", required=True, help="portable generator weights file")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def _add_train_flags(p):
    p.add_argument("--n-download", type=float)
    p.add_argument("--upload-ratio", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--embedder-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--generator-lr", type=float,
                   help="generator-side adversarial lr (default: --learning-rate)")


def _add_attack_flags(p):
    p.add_argument("--input-len", type=int)
    p.add_argument("--attack-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--attack-batch-size", type=int)
    p.add_argument("--attack-learning-rate", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="padlab",
        description="adversarial traffic-padding laboratory",
    )
    parser.add_argument("--version", action="version", version=f"padlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus or flow pairs")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--volume-scale", type=float)
    p.add_argument("--flows", type=int, help="emit this many matched flow pairs instead")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-wf", help="train a fingerprinting-defense policy")
    _add_common(p, corpus=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_wf)

    p = sub.add_parser("train-fc", help="train a flow-correlation-defense policy")
    _add_common(p)
    p.add_argument("--in", dest="corpus", help="directory with entry/ and exit/ flows")
    p.add_argument("--flows", type=int, help="synthesize this many matched pairs instead")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_fc)

    p = sub.add_parser("defend", help="apply a trained policy to a corpus")
    _add_common(p, corpus=True, weights=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("front", help="apply the Rayleigh-burst baseline defense")
    _add_common(p, corpus=True)
    p.add_argument("--n-client", type=int)
    p.add_argument("--n-server", type=int)
    p.add_argument("--w-min", type=float)
    p.add_argument("--w-max", type=float)
    p.set_defaults(func=cmd_front)

    p = sub.add_parser("evaluate", help="closed-world attack accuracy on a corpus")
    _add_common(p, corpus=True)
    p.add_argument("--test", help="explicit test corpus (otherwise k-fold)")
    p.add_argument("--variant", choices=("direction", "directional-timing", "binned"))
    _add_attack_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-weights", help="re-export weights and golden vectors")
    _add_common(p, weights=True)
    p.add_argument("--golden", action="store_true", default=None,
                   help="also write golden inference/rate-meter vectors")
    p.add_argument("--steps", type=int, help="golden inference steps")
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("roc", help="flow-correlation ROC for a fresh attacker")
    _add_common(p)
    p.add_argument("--weights", help="defend entry flows with this policy")
    p.add_argument("--train-flows", type=int)
    p.add_argument("--test-flows", type=int)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("tradeoff", help="sweep the padding budget, emit overhead/accuracy")
    _add_common(p, corpus=True)
    p.add_argument("--sweep", help="comma list of N_download values")
    p.add_argument("--seeds", help="comma list of seeds")
    _add_train_flags(p)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_tradeoff)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/--version text
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:
        logger.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
