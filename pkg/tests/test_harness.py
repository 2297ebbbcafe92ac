import numpy as np
import pytest

from vicious.graphs import GraphError, make_graph, normalize, random_split
from vicious.harness import (
    AttackReport,
    ExperimentConfig,
    TargetReport,
    degree_proportional_budget,
    evaluate_attack,
    generate_synthetic,
    loglog_slope,
    run_experiment,
    scaling_benchmark,
    select_targets,
    strip_timings,
    summary_rows,
    unsupported_attack_message,
)
from vicious.models import (
    VictimModel,
    margin,
    predict,
    train_victim,
    victim_config,
)
from vicious.util import derive_seed


def block_setup(seed=1, n=120, epochs=80):
    g = generate_synthetic(n, 6.0, 20, 3, model="block", seed=seed)
    na = normalize(g)
    split = random_split(g, seed + 1)
    victim = train_victim(g, na, split,
                          victim_config(seed=0, epochs=epochs, hidden=8))
    return g, na, split, victim


# ------------------------------------------------------------ targets


def test_select_targets_matches_sort_oracle():
    g, na, split, victim = block_setup()
    ts = select_targets(g, na, victim, split, seed=3,
                        num_high=3, num_low=3, num_random=4)
    test = split.test[g.labels[split.test] >= 0]
    preds = predict(victim, g, na, test)
    correct = [int(v) for v in test[preds == g.labels[test]]]
    ranked = sorted(correct, key=lambda v: (margin(victim, g, na, v), v))
    assert set(ts.low_margin) == set(ranked[:3])
    assert set(ts.high_margin) == set(ranked[-3:])
    chosen = set(ts.all())
    assert len(chosen) == 10
    assert chosen <= set(correct)
    assert set(ts.random).isdisjoint(ts.high_margin)
    assert set(ts.random).isdisjoint(ts.low_margin)
    for v in ts.all():
        assert v in test
    again = select_targets(g, na, victim, split, seed=3,
                           num_high=3, num_low=3, num_random=4)
    assert again.to_dict() == ts.to_dict()


def test_select_targets_all_wrong_gives_empty_set():
    g = generate_synthetic(40, 4.0, 12, 2, model="block", seed=5)
    labels = np.ones(g.n, dtype=np.int64)
    g = make_graph(g.adjacency, g.features, labels, 2)
    na = normalize(g)
    split = random_split(g, 1)
    rng = np.random.default_rng(0)
    # zero first layer: uniform output, argmax class 0, every node wrong
    victim = VictimModel(w1=np.zeros((g.num_features, 4)),
                         w2=rng.normal(size=(4, 2)), num_classes=2)
    ts = select_targets(g, na, victim, split, seed=0)
    assert ts.all() == ()
    assert "target_shortfall" in ts.flags
    assert ts.flags["target_shortfall"]["available"] == 0


def test_select_targets_proportional_shortfall():
    g, na, split, victim = block_setup(seed=7, n=60)
    ts = select_targets(g, na, split=split, victim=victim, seed=1,
                        num_high=10, num_low=10, num_random=30)
    avail = ts.flags["target_shortfall"]["available"]
    assert avail < 50
    assert len(ts.all()) == len(set(ts.all())) <= avail
    assert len(ts.high_margin) < 10 and len(ts.low_margin) < 10


# ------------------------------------------------------------ synthetic


def test_generate_synthetic_reproducible_and_distinct():
    a = generate_synthetic(100, 5.0, 16, 3, model="preferential", seed=4)
    b = generate_synthetic(100, 5.0, 16, 3, model="preferential", seed=4)
    assert a.adjacency.indices.tobytes() == b.adjacency.indices.tobytes()
    assert a.features.indices.tobytes() == b.features.indices.tobytes()
    c = generate_synthetic(100, 5.0, 16, 3, model="preferential", seed=5)
    assert a.adjacency.indices.tobytes() != c.adjacency.indices.tobytes()


@pytest.mark.parametrize("model", ["block", "preferential"])
def test_generate_synthetic_degree_within_ten_percent(model):
    g = generate_synthetic(400, 8.0, 24, 4, model=model, seed=2)
    avg = 2.0 * g.num_edges / g.n
    assert abs(avg - 8.0) <= 0.8, avg
    assert g.n >= 380  # the component keeps nearly everything


def test_generate_synthetic_block_is_homophilous():
    g = generate_synthetic(300, 6.0, 18, 3, model="block", seed=9)
    coo = g.adjacency.tocoo()
    same = (g.labels[coo.row] == g.labels[coo.col]).mean()
    assert same >= 0.6
    assert set(np.unique(g.labels)) == {0, 1, 2}


def test_generate_synthetic_supports_learning():
    g, na, split, victim = block_setup(seed=11, n=150, epochs=120)
    ts = select_targets(g, na, victim, split, seed=0,
                        num_high=5, num_low=5, num_random=10)
    targets = np.asarray(ts.all())
    acc = (predict(victim, g, na, targets) == g.labels[targets]).mean()
    assert acc >= 0.7


def test_generate_synthetic_rejects_bad_parameters():
    with pytest.raises(GraphError):
        generate_synthetic(3, 2.0, 8, 4, seed=0)   # n < classes
    with pytest.raises(GraphError):
        generate_synthetic(50, 2.0, 2, 4, seed=0)  # d < classes
    with pytest.raises(GraphError):
        generate_synthetic(50, 60.0, 8, 2, seed=0)
    with pytest.raises(GraphError):
        generate_synthetic(50, 4.0, 8, 2, model="smallworld", seed=0)
    with pytest.raises(GraphError):
        generate_synthetic(50, 4.0, 8, 2, feats_per_node=0, seed=0)


# ------------------------------------------------------------ experiment


def small_cfg(**kw):
    base = dict(master_seed=7, attacks=("clean", "random", "afgsm"),
                budget_nodes=3, budget_edges=6, repeats=2, num_high=2,
                num_low=2, num_random=2, epochs=60, hidden=8)
    base.update(kw)
    return ExperimentConfig(**base)


def test_run_experiment_end_to_end_and_isolation():
    g = generate_synthetic(120, 6.0, 20, 3, model="block", seed=1)
    before = (g.adjacency.data.tobytes(), g.adjacency.indices.tobytes(),
              g.features.data.tobytes(), g.labels.tobytes())
    cfg = small_cfg()
    res = run_experiment(g, cfg)
    after = (g.adjacency.data.tobytes(), g.adjacency.indices.tobytes(),
             g.features.data.tobytes(), g.labels.tobytes())
    assert before == after
    assert set(res.reports) == {"clean", "random", "afgsm"}
    for rep in res.reports.values():
        assert len(rep.entries) == 6
        for e in rep.entries:
            assert e.error is None, e.error
            assert e.attack_ok
            assert len(e.correct) == 2
    clean = res.reports["clean"].aggregate()["accuracy_mean"]
    afgsm = res.reports["afgsm"].aggregate()["accuracy_mean"]
    rand = res.reports["random"].aggregate()["accuracy_mean"]
    assert afgsm <= clean
    assert afgsm <= rand
    assert res.victim_test_accuracy >= 0.7


def test_run_experiment_independent_of_jobs():
    g = generate_synthetic(100, 6.0, 20, 3, model="block", seed=3)
    a = run_experiment(g, small_cfg(jobs=1))
    b = run_experiment(g, small_cfg(jobs=4))
    assert strip_timings(a.to_dict()) == strip_timings(b.to_dict())


def test_clean_entries_match_direct_retraining():
    g = generate_synthetic(100, 6.0, 20, 3, model="block", seed=5)
    cfg = small_cfg(attacks=("clean",))
    res = run_experiment(g, cfg)
    na = normalize(g)
    split = random_split(g, derive_seed(cfg.master_seed, "split"))
    for e in res.reports["clean"].entries:
        for i, pred in enumerate(e.predictions):
            vcfg = victim_config(
                seed=derive_seed(cfg.master_seed, "retrain", e.target, i),
                epochs=cfg.epochs, hidden=cfg.hidden)
            model = train_victim(g, na, split, vcfg)
            assert pred == int(predict(model, g, na,
                                       np.asarray([e.target]))[0])


def test_aggregate_matches_independent_recompute():
    g = generate_synthetic(100, 6.0, 20, 3, model="block", seed=7)
    res = run_experiment(g, small_cfg(attacks=("random",)))
    rep = res.reports["random"]
    agg = rep.aggregate()
    m = np.array([[1.0 if c else 0.0 for c in e.correct]
                  for e in rep.entries])
    per_repeat = m.mean(axis=0)
    assert abs(agg["accuracy_mean"] - per_repeat.mean()) <= 1e-12
    assert abs(agg["accuracy_std"] - per_repeat.std()) <= 1e-12
    assert 0.0 <= agg["accuracy_mean"] <= 1.0
    assert agg["accuracy_std"] >= 0.0


def test_report_json_roundtrip():
    e = TargetReport(target=4, clean_margin=1.25, predictions=(1, 2),
                     correct=(True, False), attack_ok=True, attack_ms=3.5,
                     retrain_ms=8.0)
    rep = AttackReport(attack="random", entries=(e,))
    assert AttackReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()


def test_failures_recorded_per_target():
    g = generate_synthetic(30, 4.0, 12, 2, model="block", seed=9)
    # one injected node demanding more endpoints than the graph can offer
    cfg = small_cfg(attacks=("afgsm",), budget_nodes=1,
                    budget_edges=g.n + 10, num_high=1, num_low=1,
                    num_random=0)
    res = run_experiment(g, cfg)
    rep = res.reports["afgsm"]
    assert all(e.error is not None for e in rep.entries)
    agg = rep.aggregate()
    assert agg["failures"] == len(rep.entries)
    assert np.isnan(agg["accuracy_mean"])


def test_summary_rows_and_unsupported_attack():
    g = generate_synthetic(100, 6.0, 20, 3, model="block", seed=11)
    res = run_experiment(g, small_cfg(attacks=("clean", "random")))
    rows = summary_rows(res, "toy")
    assert [r["attack"] for r in rows] == ["clean", "random"]
    assert all(r["dataset"] == "toy" for r in rows)
    with pytest.raises(GraphError, match="meta"):
        ExperimentConfig(attacks=("clean", "meta-attack"))
    msg = unsupported_attack_message("nettack")
    assert "nettack" in msg and "afgsm" in msg


def test_degree_proportional_budget():
    g = generate_synthetic(80, 6.0, 16, 2, model="block", seed=13)
    degs = np.asarray(g.degrees())
    v0 = int(np.argmax(degs))
    b = degree_proportional_budget(g, v0)
    assert b.num_nodes == max(1, int(degs[v0]) // 2)
    assert b.num_edges == max(int(degs[v0]), b.num_nodes)
    assert sum(b.degrees) == b.num_edges
    v1 = int(np.argmin(degs))
    b1 = degree_proportional_budget(g, v1)
    assert b1.num_nodes >= 1 and b1.num_edges >= b1.num_nodes


# ------------------------------------------------------------ timing


def test_scaling_benchmark_smoke_and_errors():
    rows = scaling_benchmark([150], ["afgsm"], seed=1, budget_nodes=2,
                             budget_edges=4, targets_per_size=2, epochs=30)
    assert len(rows) == 1
    assert rows[0]["status"] == "ok"
    assert rows[0]["median_ms"] > 0.0
    assert rows[0]["p90_ms"] >= rows[0]["median_ms"]
    with pytest.raises(GraphError):
        scaling_benchmark([200, 100], ["afgsm"], seed=0)
    with pytest.raises(GraphError):
        scaling_benchmark([100], ["nettack"], seed=0)


def test_scaling_benchmark_timeout_marks_and_skips():
    rows = scaling_benchmark([120, 150], ["afgsm"], seed=2, budget_nodes=2,
                             budget_edges=4, targets_per_size=2, epochs=30,
                             timeout_s=1e-9)
    assert [r["status"] for r in rows] == ["timeout", "timeout"]
    assert rows[1]["median_ms"] is None


def test_doubling_edge_budget_does_not_blow_up_attack_time():
    import time
    from vicious.afgsm import assign_degrees, run_afgsm
    from vicious.graphs import Budget, build_cooccurrence, feature_budget
    from vicious.models import surrogate_config, train_surrogate

    g = generate_synthetic(800, 8.0, 24, 4, model="preferential", seed=3)
    na = normalize(g)
    split = random_split(g, 5)
    s = train_surrogate(g, na, split, surrogate_config(seed=0, epochs=60))
    cooc = build_cooccurrence(g)
    v0 = int(split.test[0])

    def median_ms(edges):
        b = Budget(num_nodes=5, num_edges=edges,
                   features_per_node=feature_budget(g),
                   degrees=assign_degrees(5, edges), mode="direct")
        samples = []
        for _ in range(5):
            t0 = time.perf_counter()
            run_afgsm(g, s, v0, b, seed=1, cooc=cooc)
            samples.append(time.perf_counter() - t0)
        return float(np.median(samples)) * 1000.0

    base = median_ms(10)
    doubled = median_ms(20)
    assert doubled <= 2.5 * base, (base, doubled)


def test_loglog_slope_recovers_power_law():
    sizes = np.array([100, 200, 400, 800])
    times = 3.0 * sizes ** 1.25
    assert loglog_slope(sizes, times) == pytest.approx(1.25, abs=1e-9)
    with pytest.raises(GraphError):
        loglog_slope([100], [5.0])
