"""Command-line interface binding loaders, training, attacks, and the
evaluation harness into reproducible runs.

Subcommands
-----------
  train       fit a surrogate or victim checkpoint and print clean accuracy
  attack      run one attack against chosen targets, write perturbations
  experiment  full protocol from a config file: targets, attacks, retrains
  bench       attack-time scaling series over synthetic graph sizes

Configuration is a sectioned key-value file ([dataset] or [synthetic],
[experiment], [bench]); any value can also be set by a flag, and flags
win. Every artifact directory receives a manifest.json holding the fully
resolved configuration, the package version, the master seed, and sha256
digests of all input files; passing a manifest back through --config
re-runs the same configuration. All randomness descends from the single
master seed, so re-runs reproduce results at any --jobs value.

Set VICIOUS_LOG=INFO (or DEBUG) for progress output.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import load_graph, load_split
from .figures import accuracy_figure, timing_figure
from .graphs import (
    GraphError,
    Split,
    build_cooccurrence,
    largest_connected_component,
    normalize,
    random_split,
    save_perturbation,
)
from .harness import (
    KNOWN_ATTACKS,
    ExperimentConfig,
    build_budget,
    dispatch_attack,
    generate_synthetic,
    run_experiment,
    scaling_benchmark,
    summary_rows,
    unsupported_attack_message,
)
from .models import (
    CheckpointError,
    predict,
    save_model,
    surrogate_config,
    train_surrogate,
    train_victim,
    victim_config,
)
from .util import Stopwatch, configure_logging, derive_seed

SUMMARY_COLUMNS = ("attack", "dataset", "accuracy_mean", "accuracy_std",
                   "attack_time_ms", "retrain_time_ms")
TIMING_COLUMNS = ("size", "attack", "median_ms", "p90_ms", "status")

# defaults materialized into every manifest; CLI > config file > these
EXPERIMENT_DEFAULTS = {
    "seed": 0,
    "attacks": ("clean", "random", "afgsm", "afgsm-ada"),
    "nodes": 10,
    "edges": 20,
    "mode": "direct",
    "edge_only": False,
    "degree_scheme": "even",
    "proportional": False,
    "repeats": 5,
    "high": 10,
    "low": 10,
    "random": 30,
    "hidden": 16,
    "epochs": 200,
    "strategy": "sequential",
}
SYNTHETIC_DEFAULTS = {
    "model": "block",
    "n": 400,
    "avg_degree": 8.0,
    "d": 64,
    "classes": 5,
    "feats_per_node": 3,
    "homophily": 0.8,
    "seed": 0,
}
BENCH_DEFAULTS = {
    "sizes": (1000, 2000, 4000),
    "attacks": ("afgsm",),
    "seed": 0,
    "nodes": 10,
    "edges": 20,
    "targets": 3,
    "epochs": 50,
    "timeout": None,
}


# ---------------------------------------------------------------- config


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path):
    """Read --config: either a sectioned key-value file or a manifest
    produced by a previous run (JSON with a "resolved" key). Returns a
    dict of section name -> key/value dict."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise GraphError(f"{path}: not valid JSON ({err})") from None
        resolved = doc.get("resolved")
        if not isinstance(resolved, dict):
            raise GraphError(f"{path}: manifest has no 'resolved' section")
        return {k: dict(v) for k, v in resolved.items()
                if isinstance(v, dict)}
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as err:
        raise GraphError(f"{path}: {err}") from None
    return {name: dict(parser[name]) for name in parser.sections()}


def _names(value) -> tuple:
    """Comma/space separated string, or an already-split list."""
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    return tuple(s for s in re.split(r"[,\s]+", str(value)) if s)


def _ints(value) -> tuple:
    return tuple(int(v) for v in _names(value))


def _bool(value):
    if isinstance(value, bool):
        return value
    states = configparser.ConfigParser.BOOLEAN_STATES
    try:
        return states[str(value).strip().lower()]
    except KeyError:
        raise GraphError(f"not a boolean: {value!r}") from None


def _optfloat(value):
    if value is None or value == "":
        return None
    return float(value)


# flag-free namespace for sections that must ignore command-line state
_NO_FLAGS = argparse.Namespace()


def _resolve(args, section: dict, defaults: dict, casts: dict) -> dict:
    """Materialize one config section: flag value if given, else config
    file value, else default. Casts apply to both sources, so a comma
    list reads the same from a flag and from a file."""
    out = {}
    for key, fallback in defaults.items():
        value = getattr(args, key, None)
        if value is None and key in section:
            value = section[key]
        if value is None:
            out[key] = fallback
            continue
        cast = casts.get(key, type(fallback) if fallback is not None else str)
        try:
            out[key] = cast(value)
        except (TypeError, ValueError):
            raise GraphError(
                f"config key '{key}': bad value {value!r}") from None
    return out


_EXPERIMENT_CASTS = {"attacks": _names, "edge_only": _bool,
                     "proportional": _bool}
_BENCH_CASTS = {"sizes": _ints, "attacks": _names, "timeout": _optfloat}


# ---------------------------------------------------------------- datasets


def _resolve_dataset(args, config: dict) -> dict:
    """Decide where the graph comes from: --edges wins, then [dataset]
    files, then [synthetic] generation parameters."""
    file_keys = ("edges", "features", "labels", "split")
    section = config.get("dataset", {})
    flags = {k: getattr(args, k if k != "edges" else "edges_file", None)
             for k in file_keys}
    if section.get("kind") == "synthetic" and not flags["edges"]:
        # manifest from an earlier synthetic run passed back as --config
        syn = _resolve(_NO_FLAGS, section, SYNTHETIC_DEFAULTS, {})
        return {"kind": "synthetic",
                "name": section.get("name", f"synthetic-{syn['model']}"),
                **syn}
    # config-file paths resolve against the config's own directory,
    # flag paths against the working directory; absolute either way so a
    # manifest re-runs from anywhere
    base = Path(args.config).resolve().parent if getattr(
        args, "config", None) else Path.cwd()
    if flags["edges"] or section:
        spec = {"kind": "files"}
        for k in file_keys:
            if flags[k] is not None:
                spec[k] = str(Path(flags[k]).resolve())
            elif section.get(k):
                spec[k] = str((base / section[k]).resolve())
            else:
                spec[k] = None
        if not spec["edges"]:
            raise GraphError("dataset section gives no edges file")
        spec["name"] = section.get(
            "name", Path(spec["edges"]).resolve().parent.name)
        return spec
    if "synthetic" in config:
        # generation parameters come from the file alone; command flags
        # like --seed and --model mean other things
        syn = _resolve(_NO_FLAGS, config["synthetic"], SYNTHETIC_DEFAULTS, {})
        return {"kind": "synthetic", "name": f"synthetic-{syn['model']}",
                **syn}
    raise GraphError(
        "no dataset configured: pass --edges or a config file with a "
        "[dataset] or [synthetic] section")


def _remap_split(split: Split, node_map: np.ndarray) -> Split:
    def remap(part):
        m = node_map[part]
        return np.sort(m[m >= 0])
    return Split(train=remap(split.train), val=remap(split.val),
                 test=remap(split.test))


def _load_dataset(spec: dict):
    """Returns (graph, node_map, split or None, input digests). The graph
    is the largest connected component; node_map sends input node ids to
    component ids (-1 for dropped nodes)."""
    if spec["kind"] == "synthetic":
        g = generate_synthetic(
            int(spec["n"]), float(spec["avg_degree"]), int(spec["d"]),
            int(spec["classes"]), model=spec["model"],
            seed=int(spec["seed"]),
            feats_per_node=int(spec["feats_per_node"]),
            homophily=float(spec["homophily"]))
        return g, np.arange(g.n), None, {}
    digests = {}
    for key in ("edges", "features", "labels", "split"):
        if spec.get(key):
            digests[str(spec[key])] = _sha256(spec[key])
    g0 = load_graph(spec["edges"], spec.get("features"), spec.get("labels"))
    g, node_map = largest_connected_component(g0)
    split = None
    if spec.get("split"):
        split = _remap_split(load_split(spec["split"], g0.n), node_map)
    return g, node_map, split, digests


def _write_manifest(path, command: str, seed: int, resolved: dict,
                    digests: dict, config_path=None) -> None:
    if config_path:
        digests = dict(digests)
        digests[str(config_path)] = _sha256(config_path)
    doc = {"version": __version__, "command": command,
           "master_seed": int(seed), "resolved": resolved,
           "inputs": digests}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row[c] is None else row[c]
                             for c in columns])


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = _load_config(args.config) if args.config else {}
    spec = _resolve_dataset(args, config)
    g, _, split, digests = _load_dataset(spec)
    seed = args.seed if args.seed is not None else 0
    epochs = args.epochs if args.epochs is not None else 200
    if split is None:
        split = random_split(g, derive_seed(seed, "split"))
    na = normalize(g)
    if args.model == "surrogate":
        model = train_surrogate(g, na, split, surrogate_config(
            seed=derive_seed(seed, "surrogate"), epochs=epochs))
    else:
        model = train_victim(g, na, split, victim_config(
            seed=derive_seed(seed, "victim"), epochs=epochs,
            hidden=args.hidden if args.hidden is not None else 16))
    test = split.test[g.labels[split.test] >= 0]
    acc = float((predict(model, g, na, test) == g.labels[test]).mean()) \
        if test.size else float("nan")
    out = Path(args.out) if args.out else Path(f"{args.model}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    resolved = {"dataset": spec,
                "train": {"model": args.model, "seed": seed,
                          "epochs": epochs,
                          "hidden": args.hidden if args.hidden is not None
                          else 16}}
    _write_manifest(out.with_name(out.name + ".manifest.json"), "train",
                    seed, resolved, digests, args.config)
    print(f"{args.model} checkpoint: {out}")
    print(f"clean test accuracy: {acc:.4f}")
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args.config) if args.config else {}
    spec = _resolve_dataset(args, config)
    knobs = _resolve(args, config.get("experiment", {}),
                     EXPERIMENT_DEFAULTS, _EXPERIMENT_CASTS)
    g, node_map, split, digests = _load_dataset(spec)
    seed = knobs["seed"]
    if split is None:
        split = random_split(g, derive_seed(seed, "split"))
    na = normalize(g)
    cfg = ExperimentConfig(
        master_seed=seed, attacks=(args.attack,),
        budget_nodes=knobs["nodes"], budget_edges=knobs["edges"],
        mode=knobs["mode"], edge_only=knobs["edge_only"],
        degree_scheme=knobs["degree_scheme"],
        proportional=knobs["proportional"], repeats=1,
        hidden=knobs["hidden"], epochs=knobs["epochs"],
        fgsm_strategy=knobs["strategy"])
    surrogate = train_surrogate(g, na, split, surrogate_config(
        seed=derive_seed(seed, "surrogate"), epochs=cfg.epochs))
    cooc = build_cooccurrence(g)
    targets = []
    for chunk in args.target:
        targets.extend(_ints(chunk))
    if not targets:
        raise GraphError("no targets given")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    lines, all_ok = [], True
    for t in targets:
        if not 0 <= t < len(node_map):
            raise GraphError(
                f"target {t} outside the input id range [0, {len(node_map)})")
        v0 = int(node_map[t])
        if v0 < 0:
            raise GraphError(
                f"target {t} is not in the largest connected component")
        budget = build_budget(g, cfg, v0)
        aseed = derive_seed(seed, "attack", args.attack, v0)
        with Stopwatch() as timer:
            result = dispatch_attack(args.attack, g, split, surrogate, v0,
                                     budget, aseed, cfg, cooc)
        save_perturbation(result.perturbation,
                          outdir / f"perturbation-{t}.json")
        p = result.perturbation
        line = (f"target {t}: attack={args.attack} "
                f"audit={'ok' if result.ok else 'FAIL'} "
                f"nodes={len(p.injected)} edges={p.edge_count()}")
        trace = p.meta.get("loss_trace")
        if trace:
            line += f" loss {trace[0]:+.4f} -> {trace[-1]:+.4f}"
        line += f" ({timer.ms:.1f} ms)"
        print(line)
        lines.append(line)
        if not result.ok:
            all_ok = False
            for failing in result.report.lines():
                if failing.startswith("FAIL"):
                    print("  " + failing)
                    lines.append("  " + failing)
    (outdir / "report.txt").write_text("\n".join(lines) + "\n")
    resolved = {"dataset": spec, "experiment": knobs,
                "attack": {"name": args.attack, "targets": targets}}
    _write_manifest(outdir / "manifest.json", "attack", seed, resolved,
                    digests, args.config)
    return 0 if all_ok else 1


def cmd_experiment(args) -> int:
    config = _load_config(args.config) if args.config else {}
    spec = _resolve_dataset(args, config)
    knobs = _resolve(args, config.get("experiment", {}),
                     EXPERIMENT_DEFAULTS, _EXPERIMENT_CASTS)
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    cfg = ExperimentConfig(
        master_seed=knobs["seed"], attacks=tuple(knobs["attacks"]),
        budget_nodes=knobs["nodes"], budget_edges=knobs["edges"],
        mode=knobs["mode"], edge_only=knobs["edge_only"],
        degree_scheme=knobs["degree_scheme"],
        proportional=knobs["proportional"], repeats=knobs["repeats"],
        num_high=knobs["high"], num_low=knobs["low"],
        num_random=knobs["random"], hidden=knobs["hidden"],
        epochs=knobs["epochs"], fgsm_strategy=knobs["strategy"], jobs=jobs)
    g, _, split, digests = _load_dataset(spec)
    result = run_experiment(g, cfg, split=split)
    rows = summary_rows(result, spec["name"])

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.json", "w") as fh:
        json.dump(result.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    _write_csv(outdir / "summary.csv", SUMMARY_COLUMNS, rows)
    accuracy_figure(rows, outdir / "accuracy.png", title=spec["name"])
    resolved = {"dataset": spec, "experiment": {**knobs, "jobs": jobs}}
    _write_manifest(outdir / "manifest.json", "experiment",
                    knobs["seed"], resolved, digests, args.config)

    print(f"victim clean test accuracy: {result.victim_test_accuracy:.4f}")
    for row in rows:
        print(f"{row['attack']}: accuracy {row['accuracy_mean']:.4f} "
              f"+/- {row['accuracy_std']:.4f} over {row['targets']} targets"
              + (f" ({row['failures']} failed)" if row["failures"] else ""))
    failures = sum(row["failures"] for row in rows)
    if failures:
        print(f"error: {failures} target evaluation(s) failed; "
              f"see report.json", file=sys.stderr)
    return 1 if failures else 0


def cmd_bench(args) -> int:
    config = _load_config(args.config) if args.config else {}
    knobs = _resolve(args, config.get("bench", {}), BENCH_DEFAULTS,
                     _BENCH_CASTS)
    for attack in knobs["attacks"]:
        if attack not in KNOWN_ATTACKS or attack == "clean":
            args.parser.error(unsupported_attack_message(attack))
    rows = scaling_benchmark(
        list(knobs["sizes"]), list(knobs["attacks"]), seed=knobs["seed"],
        budget_nodes=knobs["nodes"], budget_edges=knobs["edges"],
        targets_per_size=knobs["targets"], timeout_s=knobs["timeout"],
        epochs=knobs["epochs"])
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_csv(outdir / "timing.csv", TIMING_COLUMNS, rows)
    timing_figure(rows, outdir / "timing.png")
    resolved = {"bench": {**knobs,
                          "sizes": [int(s) for s in knobs["sizes"]],
                          "attacks": list(knobs["attacks"])}}
    _write_manifest(outdir / "manifest.json", "bench", knobs["seed"],
                    resolved, {}, args.config)
    for row in rows:
        cell = ("-" if row["median_ms"] is None
                else f"{row['median_ms']:9.1f} ms")
        print(f"n={row['size']:>6} {row['attack']:<10} {cell} "
              f"[{row['status']}]")
    return 0


# ---------------------------------------------------------------- parser


def _dataset_flags(p) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="sectioned config file, or a manifest.json from an "
                   "earlier run")
    p.add_argument("--edges", dest="edges_file", metavar="FILE",
                   help="edge list file (one 'u v' per line)")
    p.add_argument("--features", metavar="FILE",
                   help="feature nonzeros file (one 'node feature' per line)")
    p.add_argument("--labels", metavar="FILE",
                   help="label file (one 'node class' per line)")
    p.add_argument("--split", metavar="FILE",
                   help="split file (one 'node train|val|test' per line); "
                   "omitted -> seeded 10/10/80 split")


def _budget_flags(p) -> None:
    p.add_argument("--nodes", type=int, help="injected node budget")
    p.add_argument("--edges-budget", dest="edges", type=int,
                   help="total edge budget over all injected nodes")
    p.add_argument("--mode", choices=("direct", "indirect"),
                   help="direct allows edges at the target, indirect "
                   "forbids them")
    p.add_argument("--edge-only", action="store_true", default=None,
                   help="copy features from existing nodes instead of "
                   "optimizing them")
    p.add_argument("--degree-scheme", dest="degree_scheme",
                   choices=("even", "random"),
                   help="how the edge budget is divided over injected nodes")
    p.add_argument("--proportional", action="store_true", default=None,
                   help="per-target budget: degree/2 nodes, degree edges")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--epochs", type=int, help="training epoch cap")
    p.add_argument("--hidden", type=int, help="victim hidden width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vicious",
        description="Node-injection attacks on graph convolutional "
        "networks, with an evaluation harness.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and save a checkpoint")
    _dataset_flags(p)
    p.add_argument("--model", choices=("surrogate", "victim"),
                   default="victim", help="which model to train")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--epochs", type=int, help="training epoch cap")
    p.add_argument("--hidden", type=int, help="victim hidden width")
    p.add_argument("--out", metavar="FILE",
                   help="checkpoint path (default <model>.json)")
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("attack", help="attack chosen targets once each")
    _dataset_flags(p)
    _budget_flags(p)
    p.add_argument("--attack", required=True,
                   choices=("afgsm", "afgsm-ada", "fgsm", "fgsm-ada",
                            "random"))
    p.add_argument("--target", action="append", default=[], metavar="ID",
                   help="target node id in input numbering; repeatable, "
                   "comma lists accepted")
    p.add_argument("--strategy", choices=("sequential", "one_time"),
                   help="edge-gradient baseline schedule")
    p.add_argument("--out", default="attack-out", metavar="DIR",
                   help="artifact directory")
    p.set_defaults(func=cmd_attack, parser=p)

    p = sub.add_parser("experiment",
                       help="full protocol: select targets, attack, "
                       "retrain, summarize")
    _dataset_flags(p)
    _budget_flags(p)
    p.add_argument("--attacks", help="comma list out of: "
                   + ", ".join(KNOWN_ATTACKS))
    p.add_argument("--repeats", type=int, help="victim retrains per target")
    p.add_argument("--strategy", choices=("sequential", "one_time"),
                   help="edge-gradient baseline schedule")
    p.add_argument("--jobs", type=int,
                   help="parallel target evaluations (default: cores); "
                   "results do not depend on it")
    p.add_argument("--out", default="experiment-out", metavar="DIR",
                   help="artifact directory")
    p.set_defaults(func=cmd_experiment, parser=p)

    p = sub.add_parser("bench", help="attack-time scaling series")
    p.add_argument("--config", metavar="FILE",
                   help="config file with a [bench] section, or a manifest")
    p.add_argument("--sizes", help="comma list of graph sizes, ascending")
    p.add_argument("--attacks", help="comma list of attacks to time")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--nodes", type=int, help="injected node budget")
    p.add_argument("--edges-budget", dest="edges", type=int,
                   help="total edge budget")
    p.add_argument("--targets", type=int, help="targets timed per size")
    p.add_argument("--epochs", type=int, help="surrogate epoch cap")
    p.add_argument("--timeout", type=float, metavar="SECONDS",
                   help="per-target cutoff; slower attacks are skipped at "
                   "larger sizes")
    p.add_argument("--out", default="bench-out", metavar="DIR",
                   help="artifact directory")
    p.set_defaults(func=cmd_bench, parser=p)
    return parser


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GraphError, CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
