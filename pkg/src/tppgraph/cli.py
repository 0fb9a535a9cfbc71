"""Command-line entry points: synthesize data, train, evaluate.

Every command is deterministic under a fixed seed and communicates through
files: JSON-lines datasets, flat key=value run configs, npz checkpoints,
CSV logs and JSON metric reports.  Exit codes: 0 ok, 2 configuration
error, 3 training divergence, 4 unstable generator specification.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import events, granger, synth, trainer
from .intensity import TrainingInstabilityError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_GENERATOR = 4

# key -> (type, default); None default means required
_CONFIG_SCHEMA = {
    "mode": (str, "overall"),
    "family": (str, "lognorm"),
    "encoder": (str, "gru"),
    "learning_rate": (float, 1e-3),
    "embed_dim": (int, 16),
    "hidden_dim": (int, 0),          # 0 -> same as embed_dim
    "layer_number": (int, 1),
    "num_heads": (int, 1),
    "top_k": (int, 8),
    "batch_size": (int, 32),
    "max_epochs": (int, 50),
    "patience": (int, 5),
    "seed": (int, 0),
    "K": (int, 16),
    "lag": (int, 32),
    "prior_p": (float, 0.5),
    "temp_init": (float, 1.0),
    "temp_final": (float, 0.1),
    "time_mode": (str, "trig"),
    "mape_variant": (str, "interval"),
    "normalize": (bool, False),
    "dataset": (str, None),
    "num_types": (int, None),
    "split_train": (int, None),
    "split_val": (int, None),
    "split_test": (int, None),
    "out_dir": (str, "run"),
}


class ConfigFileError(ValueError):
    pass


def parse_config(path) -> dict:
    """Flat key=value file; unknown keys are rejected."""
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigFileError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _CONFIG_SCHEMA:
                raise ConfigFileError(f"{path}:{ln}: unknown key {key!r}")
            typ, _ = _CONFIG_SCHEMA[key]
            if typ is bool:
                if raw.lower() not in ("true", "false"):
                    raise ConfigFileError(f"{path}:{ln}: {key} must be true or false")
                values[key] = raw.lower() == "true"
            else:
                try:
                    values[key] = typ(raw)
                except ValueError:
                    raise ConfigFileError(
                        f"{path}:{ln}: cannot parse {key}={raw!r} as {typ.__name__}") from None
    for key, (_, default) in _CONFIG_SCHEMA.items():
        if key not in values:
            if default is None:
                raise ConfigFileError(f"{path}: missing required key {key!r}")
            values[key] = default
    return values


def _write_resolved(cfg: dict, path):
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key}={cfg[key]}\n")


def cmd_train(args) -> int:
    try:
        cfg = parse_config(args.config)
    except (OSError, ConfigFileError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    if args.mape_variant is not None:
        cfg["mape_variant"] = args.mape_variant
    if args.mode is not None:
        cfg["mode"] = args.mode

    try:
        ds = events.load_dataset(cfg["dataset"], cfg["num_types"])
        counts = (cfg["split_train"], cfg["split_val"], cfg["split_test"])
        train_ds, val_ds, test_ds = events.split(ds, counts, seed=cfg["seed"])
        t_max_train = None
        if cfg["normalize"]:
            train_ds = events.normalize_times(train_ds)
            t_max_train = train_ds.t_max_train
            val_ds = events.normalize_times(val_ds, t_max_train)
            test_ds = events.normalize_times(test_ds, t_max_train)
        tc = trainer.TrainConfig(
            learning_rate=cfg["learning_rate"], embed_dim=cfg["embed_dim"],
            layer_number=cfg["layer_number"], batch_size=cfg["batch_size"],
            max_epochs=cfg["max_epochs"], patience=cfg["patience"], seed=cfg["seed"],
            K=cfg["K"], lag=cfg["lag"], family=cfg["family"], encoder=cfg["encoder"],
            mode=cfg["mode"], hidden_dim=cfg["hidden_dim"] or None,
            num_heads=cfg["num_heads"], top_k=cfg["top_k"], time_mode=cfg["time_mode"],
            prior_p=cfg["prior_p"], temp_init=cfg["temp_init"],
            temp_final=cfg["temp_final"], mape_variant=cfg["mape_variant"])
        model = trainer.build_model(tc, cfg["num_types"])
    except (ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out_dir / "config.resolved")

    try:
        result = trainer.train(model, train_ds.sequences, val_ds.sequences, tc)
    except TrainingInstabilityError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED

    with open(out_dir / "log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_nll", "val_nll"])
        for row in result.log:
            writer.writerow([row["epoch"], f"{row['train_nll']:.8f}", f"{row['val_nll']:.8f}"])

    if cfg["mode"] == "granger":
        graph = model.eval_graph(train_ds.sequences)
        model.set_eval_graph(graph)
        granger.write_graph_artifacts(graph, out_dir / "graph.csv",
                                      temperature=cfg["temp_final"])

    report = trainer.evaluate(model, test_ds.sequences, cfg["mape_variant"])
    report["best_val_nll"] = result.best_val_nll
    report["seed"] = cfg["seed"]
    if t_max_train is not None:
        report["t_max_train"] = t_max_train
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    rng = np.random.Generator(np.random.PCG64(cfg["seed"]))
    extra = {"normalize": cfg["normalize"], "t_max_train": t_max_train,
             "mape_variant": cfg["mape_variant"]}
    with open(out_dir / "checkpoint.bin", "wb") as fh:
        trainer.save_checkpoint(fh, model, rng=rng, extra=extra)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    rng_seed = args.seed
    try:
        if args.kind == "poisson":
            gen = lambda rng: synth.gen_poisson(args.rate, args.horizon, rng)
        elif args.kind == "selfcorrecting":
            gen = lambda rng: synth.gen_selfcorrecting(args.mu, args.alpha, args.horizon, rng)
        elif args.kind == "hawkes":
            if args.spec is not None:
                with open(args.spec) as fh:
                    raw = json.load(fh)
                spec = synth.HawkesSpec(np.array(raw["base"]), np.array(raw["excite"]),
                                        np.array(raw["decay"]), raw.get("horizon", args.horizon))
            else:
                spec = synth.default_hawkes_spec(args.horizon)
            gen = lambda rng: synth.gen_hawkes(spec, rng)
        else:
            print(f"unknown generator kind {args.kind!r}", file=sys.stderr)
            return EXIT_CONFIG
        seqs = synth.gen_dataset(gen, args.n, rng_seed) if args.n > 0 else []
    except synth.StabilityError as e:
        print(f"unstable generator spec: {e}", file=sys.stderr)
        return EXIT_GENERATOR
    except ValueError as e:
        print(f"generator error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    events.save_dataset(seqs, args.out)
    if args.kind == "hawkes":
        granger.write_graph_artifacts(spec.true_graph(), str(args.out) + ".graph.csv",
                                      threshold=0.5)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, meta = trainer.load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as e:
        print(f"cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_CONFIG
    num_types = model.config["num_types"]
    try:
        ds = events.load_dataset(args.dataset, num_types)
    except (OSError, events.ValidationError) as e:
        print(f"dataset incompatible with checkpoint (M={num_types}): {e}", file=sys.stderr)
        return EXIT_CONFIG
    extra = meta.get("extra", {})
    if extra.get("normalize") and extra.get("t_max_train"):
        ds = events.normalize_times(ds, extra["t_max_train"])
    variant = args.mape_variant or extra.get("mape_variant", "interval")
    report = trainer.evaluate(model, ds.sequences, variant)
    if hasattr(model, "eval_graph_matrix"):
        graph = model.eval_graph_matrix
        if graph is None:
            graph = model.eval_graph(ds.sequences)
            model.set_eval_graph(graph)
        print("edge probabilities (row = target type, column = source type):")
        for row in graph:
            print("  " + " ".join(f"{v:6.3f}" for v in row))
        if args.true_graph:
            truth = granger.read_graph_csv(args.true_graph)
            report["auc"] = edge_auc(graph, truth)
            report["graph_accuracy"] = float(
                (granger.hard_graph(graph) == truth).mean())
    out = json.dumps(report, indent=1, sort_keys=True)
    print(out)
    if args.out:
        Path(args.out).write_text(out + "\n")
    return EXIT_OK


def edge_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    """Rank AUC of edge scores against a binary adjacency (ties get half credit)."""
    s = np.asarray(scores).reshape(-1)
    t = np.asarray(truth).reshape(-1) > 0.5
    pos, neg = s[t], s[~t]
    if len(pos) == 0 or len(neg) == 0:
        return 1.0
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tppgraph",
                                     description="event-sequence model runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None, help="run directory override")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--mode", default=None,
                         choices=["overall", "typewise", "granger"])
    p_train.add_argument("--mape-variant", default=None, choices=["interval", "printed"])
    p_train.set_defaults(func=cmd_train)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--kind", required=True,
                         choices=["poisson", "hawkes", "selfcorrecting"])
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n", type=int, default=100)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--rate", type=float, default=1.0)
    p_synth.add_argument("--horizon", type=float, default=40.0)
    p_synth.add_argument("--mu", type=float, default=0.5)
    p_synth.add_argument("--alpha", type=float, default=0.2)
    p_synth.add_argument("--spec", default=None,
                         help="JSON file with base/excite/decay/horizon")
    p_synth.set_defaults(func=cmd_synth)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--mape-variant", default=None, choices=["interval", "printed"])
    p_eval.add_argument("--true-graph", default=None)
    p_eval.set_defaults(func=cmd_eval)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
