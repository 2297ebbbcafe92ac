"""End-to-end checks of the package's headline guarantees.

Each test measures one promised property and appends a single PASS or
FAIL line to acceptance_report.txt in the repository root, so a full run
leaves a readable scorecard next to the pytest output. Properties tied
to the real citation networks run against data/citeseer and data/cora
when those directories are populated (see the README for the fetch and
conversion steps); otherwise the tests fall back to synthetic graphs of
the same shape and say so in their report line.
"""

import csv
import itertools
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from vicious.afgsm import (
    approx_loss_shift,
    edge_gradient,
    feature_gradient,
    injection_scale,
    optimal_edges,
    optimal_features,
    run_afgsm,
)
from vicious.cli import main
from vicious.datasets import dataset_paths, load_graph, save_graph
from vicious.graphs import (
    Budget,
    build_cooccurrence,
    largest_connected_component,
    make_graph,
    normalize,
    random_split,
)
from vicious.harness import (
    ExperimentConfig,
    build_budget,
    dispatch_attack,
    generate_synthetic,
    loglog_slope,
    run_experiment,
    scaling_benchmark,
    strip_timings,
    summary_rows,
)
from vicious.models import (
    surrogate_config,
    surrogate_loss_and_grad,
    train_surrogate,
    two_hop_features,
    victim_loss_and_grad,
)
from vicious.util import derive_seed

REPO = Path(__file__).resolve().parent.parent
DATA = REPO / "data"

# ------------------------------------------------------------- scorecard

_LINES: dict[int, str] = {}


def conclude(order: int, name: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    _LINES[order] = f"[{status}] {name}: {detail}"
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module", autouse=True)
def scorecard():
    yield
    text = "\n".join(_LINES[k] for k in sorted(_LINES))
    (REPO / "acceptance_report.txt").write_text(text + "\n")


# ------------------------------------------------------------- helpers


def small_random_graph(rng, n=None, d=None):
    """Connected-enough random graph with bernoulli features, small
    enough for exhaustive oracles."""
    n = int(rng.integers(5, 16)) if n is None else n
    while True:
        tri = np.triu(rng.random((n, n)) < 0.35, 1)
        adj = (tri | tri.T).astype(np.float64)
        if adj.sum(axis=1).min() >= 1:
            break
    d = int(rng.integers(3, 9)) if d is None else d
    feats = (rng.random((n, d)) < 0.45).astype(np.float64)
    labels = rng.integers(0, 2, size=n).astype(np.int64)
    return make_graph(sp.csr_matrix(adj), sp.csr_matrix(feats), labels, 2)


def graph_bytes(g):
    parts = []
    for m in (g.adjacency, g.features):
        parts += [m.indptr.tobytes(), m.indices.tobytes(), m.data.tobytes()]
    parts.append(g.labels.tobytes())
    return b"".join(parts)


# --------------------------------------------- closed form vs flip oracle


def test_single_bit_flips_match_gradient_entries_exactly():
    # every entry of the full edge gradient must equal, to rounding, the
    # difference the approximate loss actually shows when that one edge
    # bit flips; feature bits must move the loss by the shared scale
    # times their weight entry
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    checks = 0
    for _ in range(200):
        g = small_random_graph(rng)
        na = normalize(g)
        w = rng.normal(size=g.num_features)
        v0 = int(rng.integers(g.n))
        d_in = int(rng.integers(1, 5))
        feats = [int(j) for j in
                 np.flatnonzero(rng.random(g.num_features) < 0.5)]
        others = [u for u in range(g.n) if u != v0]
        rng.shuffle(others)
        for direct in (True, False):
            nbrs = sorted(({v0} if direct else set())
                          | set(others[: len(others) // 2]))
            base = approx_loss_shift(g, na, v0, nbrs, feats, d_in, w)
            grad = edge_gradient(g, na, v0, feats, w, d_in, direct,
                                 full=True)
            add = [u for u in others if u not in nbrs]
            if add:
                u = add[0]
                delta = approx_loss_shift(g, na, v0, nbrs + [u], feats,
                                          d_in, w) - base
                worst = max(worst, abs(delta - grad[u]))
                checks += 1
            drop = [u for u in nbrs if u != v0]
            if drop:
                u = drop[0]
                kept = [x for x in nbrs if x != u]
                delta = base - approx_loss_shift(g, na, v0, kept, feats,
                                                 d_in, w)
                worst = max(worst, abs(delta - grad[u]))
                checks += 1
            scale = injection_scale(na, v0, nbrs, d_in)
            j = int(rng.integers(g.num_features))
            f_plus = sorted(set(feats) | {j})
            f_minus = sorted(set(feats) - {j})
            delta = (approx_loss_shift(g, na, v0, nbrs, f_plus, d_in, w)
                     - approx_loss_shift(g, na, v0, nbrs, f_minus, d_in, w))
            worst = max(worst, abs(delta - scale * w[j]))
            checks += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 60.0
    conclude(1, "single_bit_flips_match_gradient_entries",
             ok, f"{checks} flips over 200 graphs, worst abs err "
                 f"{worst:.2e} (bound 1e-10), {elapsed:.1f} s")


# --------------------------------------------- greedy vs exhaustive oracle


def test_greedy_selections_match_exhaustive_search():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()

    # endpoints: the picked set must reach the minimum approximate loss
    # over every same-size endpoint subset
    worst_gap = -np.inf
    edge_cases = 0
    for _ in range(40):
        g = small_random_graph(rng, n=int(rng.integers(4, 13)))
        na = normalize(g)
        w = rng.normal(size=g.num_features)
        v0 = int(rng.integers(g.n))
        feats = [int(j) for j in
                 np.flatnonzero(rng.random(g.num_features) < 0.5)]
        for direct in (True, False):
            d_in = int(rng.integers(1, 4))
            grad = edge_gradient(g, na, v0, feats, w, d_in, direct)
            chosen = optimal_edges(grad, d_in, v0, direct)
            val = approx_loss_shift(g, na, v0, chosen, feats, d_in, w)
            pool = [u for u in range(g.n) if u != v0]
            k = d_in - 1 if direct else d_in
            best = min(
                approx_loss_shift(g, na, v0,
                                  list(c) + ([v0] if direct else []),
                                  feats, d_in, w)
                for c in itertools.combinations(pool, k))
            worst_gap = max(worst_gap, val - best)
            edge_cases += 1

    # features: the greedy pick must be mutually co-occurring and first
    # in sorted-(weight, index) order among all feasible sets of its
    # size; when it comes up short no single admissible extension may
    # exist
    feat_cases = 0
    for trial in range(40):
        d = 20 if trial % 8 == 0 else int(rng.integers(5, 15))
        g = small_random_graph(rng, n=int(rng.integers(6, 14)), d=d)
        w = rng.normal(size=d)
        cooc = build_cooccurrence(g)
        count = int(rng.integers(1, 4 if d == 20 else 6))
        chosen, short = optimal_features(w, cooc, count)
        chosen_t = tuple(int(j) for j in chosen)
        assert len(chosen_t) + short == count
        pairs = cooc.pairs.toarray() > 0

        def feasible(T):
            idx = list(T)
            return (all(w[j] < 0 and pairs[j, j] for j in idx)
                    and bool(pairs[np.ix_(idx, idx)].all()))

        def key(T):
            return sorted((float(w[j]), int(j)) for j in T)

        assert feasible(chosen_t), chosen_t
        size = len(chosen_t)
        if size:
            best = min(key(c)
                       for c in itertools.combinations(range(d), size)
                       if feasible(c))
            assert key(chosen_t) == best, (chosen_t, best)
        if short:
            assert not any(feasible(chosen_t + (j,))
                           for j in range(d) if j not in chosen_t)
        feat_cases += 1

    elapsed = time.perf_counter() - t0
    ok = worst_gap <= 1e-12 and elapsed < 300.0
    conclude(2, "greedy_selections_match_exhaustive_search",
             ok, f"{edge_cases} endpoint and {feat_cases} feature "
                 f"instances, worst optimality gap {worst_gap:.2e} "
                 f"(bound 1e-12), {elapsed:.1f} s")


# --------------------------------------------- approximation fidelity


def shift_fidelity_errors(g, na, surrogate, seed, draws):
    """Relative error between the predicted and the realized loss shift
    for a single injected node of mean degree, endpoints and features
    chosen by the attack itself."""
    cooc = build_cooccurrence(g)
    deg = max(1, int(round(g.degrees().mean())))
    budget = Budget(num_nodes=1, num_edges=deg,
                    features_per_node=max(1, round(g.features.nnz / g.n)),
                    degrees=(deg,), mode="direct")
    labeled = np.flatnonzero(g.labels >= 0)
    errs = []
    for i in range(draws):
        s = derive_seed(seed, "p", i)
        rng = np.random.default_rng(s)
        v0 = int(rng.choice(labeled))
        res = run_afgsm(g, surrogate, v0, budget, s, cooc=cooc)
        meta = res.perturbation.meta
        node = res.perturbation.injected[0]
        w = feature_gradient(surrogate, meta["c_old"], meta["c_new"])
        approx = approx_loss_shift(g, na, v0, node.neighbors,
                                   node.features, deg, w)
        trace = meta["loss_trace"]
        exact = trace[-1] - trace[0]
        errs.append(abs(approx - exact) / max(abs(exact), 1e-12))
    return errs


def test_injection_shift_error_small_and_shrinking_with_size():
    # the degree-preserving approximation ignores how one extra edge
    # renormalizes existing rows, an effect that fades as the graph
    # grows, so the realized-shift error must fall with size
    medians = []
    for size in (100, 1000, 10000):
        pooled = []
        for seed in (31, 47, 63):
            g = generate_synthetic(size, 4.0, 300, 5, model="block",
                                   seed=seed, feats_per_node=8,
                                   homophily=0.85)
            na = normalize(g)
            split = random_split(g, derive_seed(seed, "split"))
            sur = train_surrogate(g, na, split, surrogate_config(
                derive_seed(seed, "surrogate"), epochs=100))
            pooled += shift_fidelity_errors(g, na, sur, seed, draws=15)
        medians.append(float(np.median(pooled)))
    ok = (medians[0] > medians[1] > medians[2]) and medians[2] <= 0.10
    detail = ("median rel err " +
              " -> ".join(f"{m:.4f}" for m in medians) +
              " over sizes 100/1000/10000 (45 draws each), "
              "terminal bound 0.10")

    cora = DATA / "cora"
    if (cora / "edges.tsv").exists():
        g = largest_connected_component(
            load_graph(**{k: v for k, v in dataset_paths(cora).items()
                          if k != "split"}))
        na = normalize(g)
        split = random_split(g, derive_seed(97, "split"))
        sur = train_surrogate(g, na, split,
                              surrogate_config(derive_seed(97, "surrogate"),
                                               epochs=200))
        m = float(np.median(shift_fidelity_errors(g, na, sur, 97,
                                                  draws=30)))
        ok = ok and m <= 0.05
        detail += f"; cora median {m:.4f} (bound 0.05)"
    else:
        detail += "; cora half not run (data/cora absent)"
    conclude(3, "injection_shift_error_shrinks_with_size", ok, detail)


# --------------------------------------------- poisoning efficacy bands


def _experiment_acc(result):
    rows = summary_rows(result, "x")
    assert all(r["failures"] == 0 for r in rows), rows
    return {r["attack"]: r["accuracy_mean"] for r in rows}


@pytest.fixture(scope="module")
def poisoning_runs():
    """Five-retrain poisoning results: the full attack set plus the
    edge-only and indirect variants on a citeseer-shaped graph, and the
    adaptive attack on a cora-shaped graph. Real data is used when the
    data/ directories are populated."""
    runs = {}
    cs_root = DATA / "citeseer"
    if (cs_root / "edges.tsv").exists():
        g1 = largest_connected_component(
            load_graph(**{k: v for k, v in dataset_paths(cs_root).items()
                          if k != "split"}))
        runs["stand_in"] = False
    else:
        g1 = generate_synthetic(1200, 3.5, 600, 6, model="block", seed=11,
                                feats_per_node=20, homophily=0.85)
        runs["stand_in"] = True
    base_cfg = ExperimentConfig(
        master_seed=17, attacks=("clean", "random", "afgsm", "afgsm-ada"),
        budget_nodes=10, budget_edges=20, repeats=5,
        num_high=10, num_low=10, num_random=30)
    base = run_experiment(g1, base_cfg)
    runs["citeseer"] = _experiment_acc(base)
    runs["victim"] = base.victim_test_accuracy
    edge_cfg = replace(base_cfg, attacks=("afgsm",), edge_only=True)
    runs["edge_only"] = _experiment_acc(run_experiment(g1, edge_cfg))
    ind_cfg = replace(base_cfg, attacks=("afgsm",), mode="indirect")
    runs["indirect"] = _experiment_acc(run_experiment(g1, ind_cfg))

    co_root = DATA / "cora"
    if (co_root / "edges.tsv").exists():
        g2 = largest_connected_component(
            load_graph(**{k: v for k, v in dataset_paths(co_root).items()
                          if k != "split"}))
    else:
        g2 = generate_synthetic(2500, 4.0, 800, 7, model="block", seed=13,
                                feats_per_node=18, homophily=0.9)
    cora_cfg = ExperimentConfig(
        master_seed=19, attacks=("clean", "afgsm-ada"),
        budget_nodes=10, budget_edges=20, repeats=5,
        num_high=4, num_low=4, num_random=12)
    runs["cora"] = _experiment_acc(run_experiment(g2, cora_cfg))
    return runs


def test_poisoning_accuracy_bands(poisoning_runs):
    cs = poisoning_runs["citeseer"]
    co = poisoning_runs["cora"]
    ok = (cs["clean"] >= 0.80 and cs["afgsm"] <= 0.45
          and cs["afgsm-ada"] <= 0.35 and cs["random"] >= 0.60
          and co["clean"] >= 0.85 and co["afgsm-ada"] <= 0.40)
    where = ("synthetic stand-ins (data/ absent)"
             if poisoning_runs["stand_in"] else "real data")
    conclude(4, "poisoning_accuracy_bands", ok,
             f"citeseer-shaped clean {cs['clean']:.3f} (>=0.80) "
             f"random {cs['random']:.3f} (>=0.60) "
             f"afgsm {cs['afgsm']:.3f} (<=0.45) "
             f"ada {cs['afgsm-ada']:.3f} (<=0.35); "
             f"cora-shaped clean {co['clean']:.3f} (>=0.85) "
             f"ada {co['afgsm-ada']:.3f} (<=0.40); {where}")


def test_restricted_variants_never_beat_unrestricted(poisoning_runs):
    # taking feature choice away (edge-only) or forbidding the target
    # link (indirect) can only leave the defender better off
    base = poisoning_runs["citeseer"]["afgsm"]
    edge = poisoning_runs["edge_only"]["afgsm"]
    ind = poisoning_runs["indirect"]["afgsm"]
    ok = edge >= base and ind >= base
    conclude(5, "restricted_variants_never_beat_unrestricted", ok,
             f"accuracy under edge-only {edge:.3f} and indirect "
             f"{ind:.3f} vs unrestricted {base:.3f}; margins "
             f"{edge - base:+.3f}, {ind - base:+.3f} (both >= 0)")


# --------------------------------------------- attack cost scaling


def test_attack_time_scaling_slopes():
    sizes = [1000, 2000, 4000, 8000, 15000]
    rows = scaling_benchmark(sizes, ("afgsm", "fgsm"), seed=5,
                             targets_per_size=3, epochs=50)
    per = {}
    for r in rows:
        assert r["status"] == "ok", r
        per.setdefault(r["attack"], []).append(float(r["median_ms"]))
    slope_a = loglog_slope(sizes, per["afgsm"])
    slope_f = loglog_slope(sizes, per["fgsm"])
    top = per["afgsm"][-1]
    ok = slope_a <= 1.3 and slope_a < slope_f and top < 2000.0
    conclude(6, "attack_time_scaling", ok,
             f"log-log slope {slope_a:.3f} (<=1.3) vs dense baseline "
             f"{slope_f:.3f}, median {top:.0f} ms per target at "
             f"n=15000 (<2000 ms)")


# --------------------------------------------- constraint soundness


def test_fuzzed_attack_runs_never_violate_constraints():
    specs = [(30, 4.0, "block", 100), (45, 5.0, "preferential", 101),
             (60, 3.5, "block", 102), (70, 6.0, "preferential", 103)]
    worlds = []
    for i, (n, deg, model, seed) in enumerate(specs):
        g = generate_synthetic(n, deg, 16, 3, model=model, seed=seed,
                               feats_per_node=4)
        split = random_split(g, 200 + i)
        na = normalize(g)
        sur = train_surrogate(g, na, split,
                              surrogate_config(300 + i, epochs=40))
        worlds.append((g, split, sur, build_cooccurrence(g),
                       graph_bytes(g)))
    attacks = ("clean", "random", "afgsm", "afgsm-ada", "fgsm", "fgsm-ada")
    rng = np.random.default_rng(0)
    runs = 10000
    failures = 0
    t0 = time.perf_counter()
    for it in range(runs):
        g, split, sur, cooc, _ = worlds[int(rng.integers(len(worlds)))]
        attack = attacks[int(rng.integers(len(attacks)))]
        mode = "direct" if rng.random() < 0.5 else "indirect"
        strategy = ("one_time"
                    if mode == "direct" and rng.random() < 0.5
                    else "sequential")
        nodes = int(rng.integers(1, 5))
        edges = int(rng.integers(nodes, 3 * nodes + 1))
        cfg = ExperimentConfig(
            master_seed=int(rng.integers(2 ** 31)), attacks=("clean",),
            budget_nodes=nodes, budget_edges=edges, mode=mode,
            edge_only=bool(rng.random() < 0.25),
            degree_scheme="even" if rng.random() < 0.5 else "random",
            epochs=15, fgsm_strategy=strategy)
        labeled = split.test[g.labels[split.test] >= 0]
        v0 = int(rng.choice(labeled))
        budget = build_budget(g, cfg, v0)
        res = dispatch_attack(attack, g, split, sur, v0, budget,
                              derive_seed(0, "fuzz", it), cfg, cooc)
        if not res.ok:
            failures += 1
    mutated = sum(1 for (g, _, _, _, snap) in worlds
                  if graph_bytes(g) != snap)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and mutated == 0
    conclude(7, "fuzzed_runs_never_violate_constraints", ok,
             f"{runs} randomized runs, {failures} audit failures, "
             f"{mutated} of {len(worlds)} input graphs mutated "
             f"(bit-compared), {elapsed:.0f} s")


# --------------------------------------------- reproducibility


def _neutral_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    drop = [head.index(c) for c in ("attack_time_ms", "retrain_time_ms")]
    for row in rows[1:]:
        for i in drop:
            row[i] = "0"
    return rows


def test_rerun_from_manifest_reproduces_artifacts(tmp_path):
    root = tmp_path / "ds"
    root.mkdir()
    g = generate_synthetic(120, 6.0, 40, 3, model="block", seed=7)
    save_graph(g, root / "edges.tsv", root / "features.tsv",
               root / "labels.tsv")
    cfgf = tmp_path / "run.cfg"
    cfgf.write_text(
        "[dataset]\nname = rerun\n"
        f"edges = {root}/edges.tsv\nfeatures = {root}/features.tsv\n"
        f"labels = {root}/labels.tsv\n\n"
        "[experiment]\nseed = 3\nattacks = clean, random, afgsm\n"
        "nodes = 2\nedges = 5\nrepeats = 2\nhigh = 2\nlow = 2\n"
        "random = 2\nepochs = 60\nhidden = 8\n")

    a1, a2 = tmp_path / "a1", tmp_path / "a2"
    rc = main(["attack", "--config", str(cfgf), "--attack", "afgsm",
               "--target", "5", "--target", "9", "--out", str(a1)])
    assert rc == 0
    manifest = json.loads((a1 / "manifest.json").read_text())
    targs = [x for t in manifest["resolved"]["attack"]["targets"]
             for x in ("--target", str(t))]
    rc = main(["attack", "--config", str(a1 / "manifest.json"),
               "--attack", "afgsm", *targs, "--out", str(a2)])
    assert rc == 0
    pert_names = sorted(p.name for p in a1.glob("perturbation-*.json"))
    assert pert_names
    pert_same = all((a1 / f).read_bytes() == (a2 / f).read_bytes()
                    for f in pert_names)

    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    rc = main(["experiment", "--config", str(cfgf), "--jobs", "1",
               "--out", str(e1)])
    assert rc == 0
    rc = main(["experiment", "--config", str(e1 / "manifest.json"),
               "--jobs", "3", "--out", str(e2)])
    assert rc == 0
    csv_same = _neutral_csv(e1 / "summary.csv") == \
        _neutral_csv(e2 / "summary.csv")
    r1 = strip_timings(json.loads((e1 / "report.json").read_text()))
    r2 = strip_timings(json.loads((e2 / "report.json").read_text()))
    ok = pert_same and csv_same and r1 == r2
    conclude(8, "rerun_from_manifest_reproduces_artifacts", ok,
             f"{len(pert_names)} perturbation files byte-identical: "
             f"{pert_same}; summaries identical outside wall-clock "
             f"columns across jobs 1 vs 3: {csv_same and r1 == r2}")


# --------------------------------------------- gradient correctness


def _central(fn, arr, idx, h=1e-5):
    orig = arr[idx]
    arr[idx] = orig + h
    hi = fn()
    arr[idx] = orig - h
    lo = fn()
    arr[idx] = orig
    return (hi - lo) / (2.0 * h)


def test_training_gradients_match_finite_differences():
    g = generate_synthetic(80, 5.0, 24, 3, model="block", seed=21,
                           feats_per_node=4)
    na = normalize(g)
    split = random_split(g, 4, train_frac=0.25, val_frac=0.25)
    y = g.labels[split.train]
    rng = np.random.default_rng(5)
    checked = 0
    worst = 0.0

    feats = two_hop_features(g, na, split.train)
    w = rng.normal(scale=0.3, size=(g.num_features, g.num_classes))
    _, grad = surrogate_loss_and_grad(w, feats, y, 1e-5)
    for _ in range(60):
        idx = (int(rng.integers(w.shape[0])), int(rng.integers(w.shape[1])))
        fd = _central(lambda: surrogate_loss_and_grad(w, feats, y, 1e-5)[0],
                      w, idx)
        if abs(fd) >= 1e-6:
            worst = max(worst, abs(grad[idx] - fd) / abs(fd))
            checked += 1

    w1 = rng.normal(scale=0.4, size=(g.num_features, 8))
    w2 = rng.normal(scale=0.4, size=(8, g.num_classes))
    _, d1, d2 = victim_loss_and_grad(w1, w2, g, na, split.train, y, 5e-4)

    def vloss():
        return victim_loss_and_grad(w1, w2, g, na, split.train, y, 5e-4)[0]

    for arr, ana in ((w1, d1), (w2, d2)):
        for _ in range(40):
            idx = (int(rng.integers(arr.shape[0])),
                   int(rng.integers(arr.shape[1])))
            fd = _central(vloss, arr, idx)
            if abs(fd) >= 1e-6:
                worst = max(worst, abs(ana[idx] - fd) / abs(fd))
                checked += 1

    ok = worst <= 1e-4 and checked >= 50
    conclude(9, "training_gradients_match_finite_differences", ok,
             f"{checked} coordinates across both models, worst rel err "
             f"{worst:.2e} (bound 1e-4)")
