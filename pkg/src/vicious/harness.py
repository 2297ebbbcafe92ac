"""Evaluation protocol: pick targets, poison, retrain, time.

The measurement loop mirrors the usual poisoning setup: train a clean
victim, select 50 correctly classified test nodes (10 highest margin, 10
lowest, 30 random), run each attack once per target, then retrain the
victim several times on the poisoned graph and report how often the
target survives. Targets are independent, so the loop parallelizes over
them; every random choice flows from the master seed, so any worker
count produces the same numbers.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .afgsm import AttackResult, assign_degrees, run_afgsm, run_afgsm_ada
from .baselines import run_fgsm, run_random
from .graphs import (
    Budget,
    CooccurrenceIndex,
    Graph,
    GraphError,
    Perturbation,
    Split,
    apply_perturbation,
    build_cooccurrence,
    check_constraints,
    feature_budget,
    largest_connected_component,
    make_graph,
    normalize,
    random_split,
)
from .models import (
    margin,
    predict,
    surrogate_config,
    train_surrogate,
    train_victim,
    victim_config,
)
from .util import Stopwatch, derive_seed

log = logging.getLogger(__name__)

KNOWN_ATTACKS = ("clean", "random", "fgsm", "fgsm-ada", "afgsm", "afgsm-ada")

__all__ = [
    "KNOWN_ATTACKS",
    "AttackReport",
    "ExperimentConfig",
    "ExperimentResult",
    "TargetReport",
    "TargetSet",
    "degree_proportional_budget",
    "dispatch_attack",
    "evaluate_attack",
    "generate_synthetic",
    "loglog_slope",
    "run_experiment",
    "scaling_benchmark",
    "select_targets",
    "strip_timings",
    "summary_rows",
]


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs beyond the graph itself."""

    master_seed: int = 0
    attacks: tuple[str, ...] = ("clean", "random", "afgsm", "afgsm-ada")
    budget_nodes: int = 10
    budget_edges: int = 20
    mode: str = "direct"
    edge_only: bool = False
    degree_scheme: str = "even"
    proportional: bool = False   # per-target budget from the target degree
    repeats: int = 5
    num_high: int = 10
    num_low: int = 10
    num_random: int = 30
    hidden: int = 16
    epochs: int = 200
    fgsm_strategy: str = "sequential"
    jobs: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise GraphError("repeats must be at least 1")
        unknown = [a for a in self.attacks if a not in KNOWN_ATTACKS]
        if unknown:
            raise GraphError(unsupported_attack_message(unknown[0]))

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed, "attacks": list(self.attacks),
            "budget_nodes": self.budget_nodes,
            "budget_edges": self.budget_edges, "mode": self.mode,
            "edge_only": self.edge_only,
            "degree_scheme": self.degree_scheme,
            "proportional": self.proportional, "repeats": self.repeats,
            "num_high": self.num_high, "num_low": self.num_low,
            "num_random": self.num_random, "hidden": self.hidden,
            "epochs": self.epochs, "fgsm_strategy": self.fgsm_strategy,
            "jobs": self.jobs,
        }


def unsupported_attack_message(name: str) -> str:
    return (f"unsupported attack {name!r}; available: "
            + ", ".join(KNOWN_ATTACKS)
            + ". Graph-wide availability attacks (meta-style) and edge "
              "rewiring of existing nodes are out of scope.")


def build_budget(g: Graph, cfg: ExperimentConfig, v0: int) -> Budget:
    """Budget for one target: either the shared node/edge counts or, when
    cfg.proportional is set, half the target's degree in nodes and its
    full degree in edges."""
    if cfg.proportional:
        return degree_proportional_budget(g, v0, mode=cfg.mode,
                                          edge_only=cfg.edge_only,
                                          scheme=cfg.degree_scheme,
                                          seed=cfg.master_seed)
    return Budget(
        num_nodes=cfg.budget_nodes, num_edges=cfg.budget_edges,
        features_per_node=feature_budget(g),
        degrees=assign_degrees(cfg.budget_nodes, cfg.budget_edges,
                               cfg.degree_scheme, seed=cfg.master_seed),
        mode=cfg.mode, edge_only=cfg.edge_only)


def degree_proportional_budget(g: Graph, v0: int, mode: str = "direct",
                               edge_only: bool = False,
                               scheme: str = "even",
                               seed: int = 0) -> Budget:
    """Per-target preset: d/2 injected nodes and d edges for a target of
    degree d (never fewer than one node with one edge)."""
    d = int(g.degrees()[v0])
    nodes = max(1, d // 2)
    edges = max(d, nodes)
    return Budget(num_nodes=nodes, num_edges=edges,
                  features_per_node=feature_budget(g),
                  degrees=assign_degrees(nodes, edges, scheme, seed=seed),
                  mode=mode, edge_only=edge_only)


# ---------------------------------------------------------------- targets


@dataclass(frozen=True)
class TargetSet:
    """Correctly classified test nodes grouped by clean-victim margin."""

    high_margin: tuple[int, ...]
    low_margin: tuple[int, ...]
    random: tuple[int, ...]
    flags: dict = field(default_factory=dict)

    def all(self) -> tuple[int, ...]:
        return self.high_margin + self.low_margin + self.random

    def to_dict(self) -> dict:
        return {"high_margin": list(self.high_margin),
                "low_margin": list(self.low_margin),
                "random": list(self.random), "flags": self.flags}


def select_targets(g: Graph, na, victim, split: Split, seed: int,
                   num_high: int = 10, num_low: int = 10,
                   num_random: int = 30) -> TargetSet:
    """Pick attack targets among correctly classified labeled test nodes.

    Nodes are ranked by the victim's log-probability margin with index as
    the tie-break. The top num_high and bottom num_low margins become the
    confident and fragile groups; num_random more are drawn uniformly
    from the remainder. When fewer nodes are available than requested the
    three groups shrink proportionally and the shortfall is flagged.
    """
    test = split.test[g.labels[split.test] >= 0]
    preds = predict(victim, g, na, test)
    correct = test[preds == g.labels[test]]
    margins = np.array([margin(victim, g, na, int(v)) for v in correct])
    order = correct[np.lexsort((correct, margins))]  # ascending margin

    requested = num_high + num_low + num_random
    avail = order.size
    flags: dict = {}
    if avail < requested:
        scale = avail / requested if requested else 0.0
        num_high = int(num_high * scale)
        num_low = int(num_low * scale)
        num_random = min(avail - num_high - num_low,
                         int(np.ceil(num_random * scale)))
        flags["target_shortfall"] = {"available": avail,
                                     "requested": requested}
        log.warning("only %d correctly classified test nodes for %d "
                    "requested targets", avail, requested)

    low = order[:num_low]
    high = order[avail - num_high:] if num_high else order[:0]
    middle = order[num_low:avail - num_high] if num_high else order[num_low:]
    rng = np.random.default_rng(derive_seed(seed, "targets"))
    pick = rng.choice(middle.size, size=num_random, replace=False) \
        if num_random else np.array([], dtype=np.int64)
    rand = middle[np.sort(pick)]
    return TargetSet(
        high_margin=tuple(int(v) for v in np.sort(high)),
        low_margin=tuple(int(v) for v in np.sort(low)),
        random=tuple(int(v) for v in rand),
        flags=flags)


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class TargetReport:
    """Outcome of one attack on one target."""

    target: int
    clean_margin: float
    predictions: tuple[int, ...]   # victim prediction per retrain
    correct: tuple[bool, ...]      # prediction == true class, per retrain
    attack_ok: bool                # constraint audit verdict
    attack_ms: float
    retrain_ms: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {"target": self.target, "clean_margin": self.clean_margin,
                "predictions": list(self.predictions),
                "correct": list(self.correct), "attack_ok": self.attack_ok,
                "attack_ms": self.attack_ms, "retrain_ms": self.retrain_ms,
                "error": self.error}


@dataclass(frozen=True)
class AttackReport:
    """All targets for one attack."""

    attack: str
    entries: tuple[TargetReport, ...]

    def matrix(self) -> np.ndarray:
        """targets x repeats at-least-0/1 survival matrix over entries
        that ran."""
        rows = [e.correct for e in self.entries if e.error is None]
        return np.array(rows, dtype=float) if rows else np.zeros((0, 0))

    def aggregate(self) -> dict:
        m = self.matrix()
        ran = [e for e in self.entries if e.error is None]
        failed = len(self.entries) - len(ran)
        if m.size == 0:
            return {"attack": self.attack, "accuracy_mean": float("nan"),
                    "accuracy_std": float("nan"), "attack_time_ms": 0.0,
                    "retrain_time_ms": 0.0, "targets": 0, "failures": failed}
        per_repeat = m.mean(axis=0)
        return {
            "attack": self.attack,
            "accuracy_mean": float(per_repeat.mean()),
            "accuracy_std": float(per_repeat.std()),
            "attack_time_ms": float(np.mean([e.attack_ms for e in ran])),
            "retrain_time_ms": float(np.mean([e.retrain_ms for e in ran])),
            "targets": len(ran),
            "failures": failed,
        }

    def to_dict(self) -> dict:
        return {"attack": self.attack,
                "entries": [e.to_dict() for e in self.entries]}

    @staticmethod
    def from_dict(doc: dict) -> "AttackReport":
        entries = tuple(
            TargetReport(target=int(e["target"]),
                         clean_margin=float(e["clean_margin"]),
                         predictions=tuple(int(p) for p in e["predictions"]),
                         correct=tuple(bool(c) for c in e["correct"]),
                         attack_ok=bool(e["attack_ok"]),
                         attack_ms=float(e["attack_ms"]),
                         retrain_ms=float(e["retrain_ms"]),
                         error=e.get("error"))
            for e in doc["entries"])
        return AttackReport(attack=doc["attack"], entries=entries)


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    targets: TargetSet
    reports: dict  # attack name -> AttackReport
    victim_test_accuracy: float

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(),
                "targets": self.targets.to_dict(),
                "victim_test_accuracy": self.victim_test_accuracy,
                "reports": {k: r.to_dict() for k, r in self.reports.items()}}


def summary_rows(result: ExperimentResult, dataset: str) -> list[dict]:
    rows = []
    for name in result.config.attacks:
        agg = result.reports[name].aggregate()
        agg["dataset"] = dataset
        rows.append(agg)
    return rows


def strip_timings(doc: dict) -> dict:
    """Copy of a result document with execution-only fields normalized
    (wall-clock zeroed, worker count dropped), for byte-stable comparison
    across runs and worker counts."""
    out = json.loads(json.dumps(doc))
    out.get("config", {}).pop("jobs", None)
    for rep in out.get("reports", {}).values():
        for e in rep["entries"]:
            e["attack_ms"] = 0.0
            e["retrain_ms"] = 0.0
    return out


# ---------------------------------------------------------------- evaluate


def dispatch_attack(attack: str, g: Graph, split: Split, surrogate, v0: int,
                    budget: Budget, seed: int, cfg: ExperimentConfig,
                    cooc: CooccurrenceIndex) -> AttackResult:
    """Run one named attack against one target. "clean" yields the empty
    perturbation so the no-attack condition flows through the same
    pipeline."""
    if attack == "clean":
        p = Perturbation(injected=(),
                         meta={"attack": "clean", "target": int(v0),
                               "mode": budget.mode, "seed": int(seed),
                               "budget": budget.to_dict(), "flags": {}})
        return AttackResult(perturbation=p,
                            report=check_constraints(g, p, budget, cooc))
    if attack == "random":
        return run_random(g, v0, budget, seed, cooc=cooc)
    if attack == "afgsm":
        return run_afgsm(g, surrogate, v0, budget, seed, cooc=cooc)
    if attack == "afgsm-ada":
        return run_afgsm_ada(g, split, v0, budget, seed, surrogate=surrogate,
                             cooc=cooc, epochs=cfg.epochs)
    if attack == "fgsm":
        return run_fgsm(g, v0, budget, seed, surrogate=surrogate, split=split,
                        strategy=cfg.fgsm_strategy, cooc=cooc,
                        epochs=cfg.epochs)
    if attack == "fgsm-ada":
        return run_fgsm(g, v0, budget, seed, surrogate=surrogate, split=split,
                        strategy="sequential", adaptive=True, cooc=cooc,
                        epochs=cfg.epochs)
    raise GraphError(unsupported_attack_message(attack))


def evaluate_attack(g: Graph, na, split: Split, victim, surrogate,
                    cfg: ExperimentConfig, attack: str, v0: int,
                    cooc: CooccurrenceIndex) -> TargetReport:
    """Attack one target once, then retrain the victim cfg.repeats times
    on the poisoned graph and record whether the target survives each
    retrain. Attack failures are captured per target, not raised."""
    clean_m = margin(victim, g, na, int(v0))
    c_true = int(g.labels[v0])
    try:
        budget = build_budget(g, cfg, v0)
        seed = derive_seed(cfg.master_seed, "attack", attack, v0)
        with Stopwatch() as atk_t:
            result = dispatch_attack(attack, g, split, surrogate, v0,
                                     budget, seed, cfg, cooc)
        poisoned = apply_perturbation(g, result.perturbation)
        na_p = normalize(poisoned)
        preds, correct = [], []
        with Stopwatch() as ret_t:
            for i in range(cfg.repeats):
                vcfg = victim_config(
                    seed=derive_seed(cfg.master_seed, "retrain", v0, i),
                    epochs=cfg.epochs, hidden=cfg.hidden)
                model = train_victim(poisoned, na_p, split, vcfg)
                pred = int(predict(model, poisoned, na_p,
                                   np.asarray([v0]))[0])
                preds.append(pred)
                correct.append(pred == c_true)
        return TargetReport(
            target=int(v0), clean_margin=float(clean_m),
            predictions=tuple(preds), correct=tuple(correct),
            attack_ok=bool(result.report.ok), attack_ms=atk_t.ms,
            retrain_ms=ret_t.ms)
    except Exception as exc:  # recorded per target, surfaced in summary
        log.exception("attack %s on target %d failed", attack, v0)
        return TargetReport(target=int(v0), clean_margin=float(clean_m),
                            predictions=(), correct=(), attack_ok=False,
                            attack_ms=0.0, retrain_ms=0.0,
                            error=f"{type(exc).__name__}: {exc}")


def run_experiment(g: Graph, cfg: ExperimentConfig,
                   split: Split | None = None) -> ExperimentResult:
    """Full protocol on one graph: train victim and surrogate, select
    targets, run every configured attack on every target, retrain and
    score. Deterministic for a fixed config regardless of cfg.jobs."""
    na = normalize(g)
    if split is None:
        split = random_split(g, derive_seed(cfg.master_seed, "split"))
    victim = train_victim(g, na, split, victim_config(
        seed=derive_seed(cfg.master_seed, "victim"), epochs=cfg.epochs,
        hidden=cfg.hidden))
    surrogate = train_surrogate(g, na, split, surrogate_config(
        seed=derive_seed(cfg.master_seed, "surrogate"), epochs=cfg.epochs))
    test = split.test[g.labels[split.test] >= 0]
    acc = float((predict(victim, g, na, test) == g.labels[test]).mean()) \
        if test.size else float("nan")
    targets = select_targets(g, na, victim, split, cfg.master_seed,
                             cfg.num_high, cfg.num_low, cfg.num_random)
    cooc = build_cooccurrence(g)
    order = targets.all()
    reports = {}
    for attack in cfg.attacks:
        def work(v0, attack=attack):
            return evaluate_attack(g, na, split, victim, surrogate, cfg,
                                   attack, v0, cooc)
        if cfg.jobs > 1 and len(order) > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                entries = tuple(pool.map(work, order))
        else:
            entries = tuple(work(v0) for v0 in order)
        reports[attack] = AttackReport(attack=attack, entries=entries)
        agg = reports[attack].aggregate()
        log.info("%s: accuracy %.3f +/- %.3f over %d targets", attack,
                 agg["accuracy_mean"], agg["accuracy_std"], agg["targets"])
    return ExperimentResult(config=cfg, targets=targets, reports=reports,
                            victim_test_accuracy=acc)


# ---------------------------------------------------------------- synthetic


def generate_synthetic(n: int, avg_degree: float, d: int, num_classes: int,
                       model: str = "block", seed: int = 0,
                       feats_per_node: int = 3,
                       homophily: float = 0.8) -> Graph:
    """Labeled random graph with class-correlated features, reduced to
    its largest connected component.

    "block" splits nodes into balanced classes and draws most edges
    inside a class; "preferential" grows a scale-free graph by degree-
    biased attachment with labels assigned uniformly. Either way each
    class owns a band of feature indices and nodes draw most of their
    features from their own band, so trained models beat chance.
    """
    if num_classes < 2 or n < num_classes:
        raise GraphError(f"need n >= num_classes >= 2, got n={n}, "
                         f"classes={num_classes}")
    if d < num_classes:
        raise GraphError(f"need at least one feature per class, got d={d}")
    if not 0 < avg_degree < n:
        raise GraphError(f"average degree {avg_degree} infeasible for {n} "
                         "nodes")
    if feats_per_node < 1 or feats_per_node > d:
        raise GraphError(f"features per node {feats_per_node} outside "
                         f"[1, {d}]")
    rng = np.random.default_rng(derive_seed(seed, "synthetic", model))
    labels = np.sort(rng.integers(0, num_classes, size=n))
    m = int(round(avg_degree * n / 2.0))

    if model == "block":
        members = [np.flatnonzero(labels == c) for c in range(num_classes)]
        if any(mm.size < 2 for mm in members):
            raise GraphError("a class ended up with fewer than two nodes")
        pairs = set()
        guard = 0
        while len(pairs) < m and guard < 40:
            guard += 1
            need = m - len(pairs)
            us = rng.integers(0, n, size=need)
            vs = rng.integers(0, n, size=need)
            intra = rng.random(need) < homophily
            cls = rng.integers(0, num_classes, size=need)
            for c in range(num_classes):
                hit = np.flatnonzero(intra & (cls == c))
                mm = members[c]
                us[hit] = mm[rng.integers(0, mm.size, size=hit.size)]
                vs[hit] = mm[rng.integers(0, mm.size, size=hit.size)]
            keep = us != vs
            for u, v in zip(us[keep], vs[keep]):
                pairs.add((min(u, v), max(u, v)))
        edges = np.array(sorted(pairs), dtype=np.int64)
    elif model == "preferential":
        attach = max(1, int(round(avg_degree / 2.0)))
        if attach >= n:
            raise GraphError("attachment count exceeds node count")
        stubs = []  # endpoint multiset; sampling it is degree-biased
        pairs = set()
        core = attach + 1
        for u in range(core):
            for v in range(u + 1, core):
                pairs.add((u, v))
                stubs += [u, v]
        for u in range(core, n):
            chosen = set()
            while len(chosen) < min(attach, u):
                v = int(stubs[rng.integers(len(stubs))])
                chosen.add(v)
            for v in chosen:
                pairs.add((min(u, v), max(u, v)))
                stubs += [u, v]
        edges = np.array(sorted(pairs), dtype=np.int64)
        labels = rng.integers(0, num_classes, size=n)
    else:
        raise GraphError(f"unknown synthetic model {model!r}")

    band = d // num_classes
    rows, cols = [], []
    for i in range(n):
        own = band * labels[i] + rng.choice(band, size=min(feats_per_node,
                                                           band),
                                            replace=False)
        noise = rng.random(own.size) >= homophily
        own[noise] = rng.integers(0, d, size=int(noise.sum()))
        for j in set(int(x) for x in own):
            rows.append(i)
            cols.append(j)
    adj = sp.csr_matrix(
        (np.ones(2 * len(edges)),
         (np.concatenate([edges[:, 0], edges[:, 1]]),
          np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n))
    feats = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, d))
    g = make_graph(adj, feats, labels.astype(np.int64), num_classes)
    sub, _ = largest_connected_component(g)
    return sub


# ---------------------------------------------------------------- timing


def loglog_slope(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    sizes = np.asarray(sizes, dtype=float)
    times = np.asarray(times, dtype=float)
    if sizes.size < 2:
        raise GraphError("need at least two sizes for a slope")
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def scaling_benchmark(sizes, attacks, seed: int = 0,
                      budget_nodes: int = 10, budget_edges: int = 20,
                      targets_per_size: int = 3, avg_degree: float = 10.0,
                      d: int = 32, num_classes: int = 5,
                      timeout_s: float | None = None,
                      epochs: int = 50) -> list[dict]:
    """Median attack wall-clock per graph size, victim retraining
    excluded.

    One synthetic graph per size; the surrogate is trained once per size
    and shared. An attack whose first target exceeds timeout_s is marked
    "timeout" there and skipped at larger sizes, since cost only grows.

    Returns rows of {size, attack, median_ms, p90_ms, status}.
    """
    if list(sizes) != sorted(sizes):
        raise GraphError("sizes must be ascending")
    unknown = [a for a in attacks if a not in KNOWN_ATTACKS or a == "clean"]
    if unknown:
        raise GraphError(unsupported_attack_message(unknown[0]))
    rows = []
    dead = set()
    for size in sizes:
        g = generate_synthetic(size, avg_degree, d, num_classes,
                               model="preferential", seed=derive_seed(
                                   seed, "bench", size))
        split = random_split(g, derive_seed(seed, "bench-split", size))
        na = normalize(g)
        surrogate = train_surrogate(g, na, split, surrogate_config(
            seed=derive_seed(seed, "bench-surrogate", size), epochs=epochs))
        cfg = ExperimentConfig(master_seed=seed, attacks=("clean",),
                               budget_nodes=budget_nodes,
                               budget_edges=budget_edges, epochs=epochs)
        cooc = build_cooccurrence(g)
        rng = np.random.default_rng(derive_seed(seed, "bench-targets", size))
        labeled = split.test[g.labels[split.test] >= 0]
        targets = rng.choice(labeled, size=min(targets_per_size,
                                               labeled.size), replace=False)
        for attack in attacks:
            if attack in dead:
                rows.append({"size": int(size), "attack": attack,
                             "median_ms": None, "p90_ms": None,
                             "status": "timeout"})
                continue
            times = []
            status = "ok"
            for v0 in targets:
                budget = build_budget(g, cfg, int(v0))
                aseed = derive_seed(seed, "attack", attack, int(v0))
                with Stopwatch() as t:
                    dispatch_attack(attack, g, split, surrogate, int(v0),
                                    budget, aseed, cfg, cooc)
                times.append(t.ms)
                if timeout_s is not None and t.ms > 1000.0 * timeout_s:
                    status = "timeout"
                    dead.add(attack)
                    break
            if status == "timeout":
                rows.append({"size": int(size), "attack": attack,
                             "median_ms": None, "p90_ms": None,
                             "status": "timeout"})
            else:
                rows.append({"size": int(size), "attack": attack,
                             "median_ms": float(np.median(times)),
                             "p90_ms": float(np.percentile(times, 90)),
                             "status": "ok"})
            log.info("bench size=%d attack=%s -> %s", size, attack,
                     rows[-1]["median_ms"] or "timeout")
    return rows
