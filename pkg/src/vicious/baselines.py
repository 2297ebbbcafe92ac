"""Reference attacks: random node injection and exact-gradient edge flips.

run_random injects noise nodes (uniform endpoints, features copied from a
sampled original node) and calibrates how much damage injection does with
no signal at all.

run_fgsm is the strong-but-slow counterpart: it scores every admissible
edge bit by the exact gradient of the surrogate margin through the
renormalized operator, including the degree terms, and flips the most
negative one at a time. That takes dense linear algebra over the whole
graph per flip, which is the point: it prices what the closed-form
approximation saves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .afgsm import AttackResult, feature_gradient, optimal_features
from .graphs import (
    BoundsError,
    Budget,
    BudgetError,
    CooccurrenceIndex,
    Graph,
    InjectedNode,
    Perturbation,
    apply_perturbation,
    build_cooccurrence,
    check_constraints,
    normalize,
)
from .models import (
    SurrogateModel,
    predict,
    runner_up_class,
    surrogate_config,
    train_surrogate,
)
from .util import derive_seed

log = logging.getLogger(__name__)

__all__ = [
    "dense_flip_gradient",
    "exact_margin",
    "run_fgsm",
    "run_random",
]


# ---------------------------------------------------------------- random


def _copied_row(g: Graph, src: int) -> tuple[int, ...]:
    x = g.features
    return tuple(int(j) for j in x.indices[x.indptr[src]:x.indptr[src + 1]])


def run_random(g: Graph, v0: int, budget: Budget, seed: int,
               cooc: CooccurrenceIndex | None = None) -> AttackResult:
    """Inject budget.num_nodes nodes with uniformly sampled endpoints.

    Each node draws its degrees[t] endpoints without replacement from the
    graph as it stands (the target is just another candidate in direct
    mode and excluded in indirect mode) and copies the feature row of a
    uniformly sampled original node, so every constraint holds by
    construction.
    """
    if not 0 <= v0 < g.n:
        raise BoundsError(f"target {v0} outside [0, {g.n})")
    if cooc is None:
        cooc = build_cooccurrence(g)
    rng = np.random.default_rng(derive_seed(seed, "random"))
    graph = g
    injected: list[InjectedNode] = []
    copied: list[int] = []
    for d_in in budget.degrees:
        pool = np.arange(graph.n)
        if budget.mode == "indirect":
            pool = pool[pool != v0]
        if d_in > pool.size:
            raise BudgetError(
                f"degree {d_in} exceeds the {pool.size} available endpoints")
        nbrs = np.sort(rng.choice(pool, size=d_in, replace=False))
        src = int(rng.integers(g.n))
        node = InjectedNode(neighbors=tuple(int(u) for u in nbrs),
                            features=_copied_row(g, src))
        graph = apply_perturbation(graph, Perturbation(injected=(node,)))
        injected.append(node)
        copied.append(src)
    meta = {
        "attack": "random",
        "target": int(v0),
        "mode": budget.mode,
        "seed": int(seed),
        "budget": budget.to_dict(),
        "flags": {"copied_features": True, "copied_from": copied},
    }
    p = Perturbation(injected=tuple(injected), meta=meta)
    return AttackResult(perturbation=p,
                        report=check_constraints(g, p, budget, cooc))


# ---------------------------------------------------------------- fgsm


def exact_margin(atil: np.ndarray, deg: np.ndarray, h: np.ndarray,
                 v0: int) -> float:
    """Margin e_v0' Ahat^2 h for a dense self-looped adjacency and its
    degree vector."""
    dinv = 1.0 / np.sqrt(deg)
    s0 = dinv[v0] * (atil[v0] * dinv)
    return float(s0 @ (dinv * (atil @ (dinv * h))))


def _margin_vectors(atil, deg, h, v0):
    dinv = 1.0 / np.sqrt(deg)
    s0 = dinv[v0] * (atil[v0] * dinv)
    q = dinv * (atil @ (dinv * h))
    t = dinv * (atil @ (dinv * s0))
    margin = float(s0 @ q)
    rc = 2.0 * s0 * q + h * t
    rc[v0] += margin
    return dinv, s0, q, rc, margin


def _grad_row(a, v0, deg, dinv, s0, q, rc, h):
    row = (s0[a] * h + s0 * h[a]) * (dinv * dinv[a])
    row[v0] += q[a] * dinv[a] * dinv[v0]
    row -= 0.5 * (rc / deg + rc[a] / deg[a])
    return row

def dense_flip_gradient(atil: np.ndarray, deg: np.ndarray, h: np.ndarray,
                        v0: int, a: int) -> np.ndarray:
    """Exact derivative of the margin at v0 for toggling each symmetric
    edge (a, u), degree renormalization included.

    Parameters
    ----------
    atil : dense adjacency with unit diagonal (self loops in place).
    deg : its row sums (1 + degree).
    h : per-node feature score X @ w.
    v0, a : target node and the endpoint common to all candidate flips.

    Returns
    -------
    ndarray of shape (n,); entry u is d margin / d atil[a, u]. The entry
    at u = a corresponds to the frozen diagonal and must be ignored.
    """
    dinv, s0, q, rc, _ = _margin_vectors(atil, deg, h, v0)
    return _grad_row(a, v0, deg, dinv, s0, q, rc, h)


def _flip(atil, deg, a, u):
    atil[a, u] = atil[u, a] = 1.0
    deg[a] += 1.0
    deg[u] += 1.0


@dataclass
class _FgsmRun:
    """Dense working state shared by both flip strategies."""

    atil: np.ndarray        # preallocated (n0 + k) square, live view via m
    deg: np.ndarray
    h: np.ndarray
    m: int                  # nodes currently active
    trace: list

    def view(self):
        return self.atil[:self.m, :self.m], self.deg[:self.m], self.h[:self.m]

    def activate(self, score: float):
        i = self.m
        self.atil[i, i] = 1.0
        self.deg[i] = 1.0
        self.h[i] = score
        self.m += 1
        return i

    def record(self, v0):
        atil, deg, h = self.view()
        self.trace.append(exact_margin(atil, deg, h, v0))


def _best_flip(run: _FgsmRun, v0: int, owners, indirect: bool):
    """Most negative admissible flip among (a, u) with a in owners; ties
    go to the lower owner index, then the lower endpoint."""
    atil, deg, h = run.view()
    dinv, s0, q, rc, _ = _margin_vectors(atil, deg, h, v0)
    best = None
    for a in owners:
        row = _grad_row(a, v0, deg, dinv, s0, q, rc, h)
        open_bits = atil[a] == 0.0
        if indirect:
            open_bits[v0] = False
        if not open_bits.any():
            continue
        masked = np.where(open_bits, row, np.inf)
        u = int(np.argmin(masked))
        if best is None or masked[u] < best[0]:
            best = (float(masked[u]), int(a), u)
    return best


def run_fgsm(g: Graph, v0: int, budget: Budget, seed: int,
             surrogate: SurrogateModel | None = None, split=None,
             strategy: str = "sequential", adaptive: bool = False,
             cooc: CooccurrenceIndex | None = None,
             epochs: int = 200) -> AttackResult:
    """Edge-flip attack scored by the exact margin gradient.

    strategy "one_time" activates every node up front, wires each to the
    target (spending num_nodes of the edge budget), then spends the rest
    on the single most negative flip anywhere in the injected block,
    never unflipping. "sequential" finishes one node before starting the
    next: its target link first in direct mode, then one flip at a time.
    Flips stop early when no remaining candidate lowers the margin; the
    unspent budget lands in flags["improvement_exhausted"].

    adaptive (sequential only) retrains the surrogate on the perturbed
    graph before every node after the first, like the adaptive closed
    form attack. A missing surrogate is trained from split; split is also
    required for adaptive refits.

    The per-flip cost is a handful of dense matrix-vector products over
    the whole graph, by design; this is the expensive reference point.
    """
    if strategy not in ("one_time", "sequential"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if adaptive and strategy != "sequential":
        raise ValueError("adaptive refitting applies to the sequential "
                         "strategy only")
    if strategy == "one_time" and budget.mode == "indirect":
        raise ValueError("one_time wires every node to the target and "
                         "cannot run in indirect mode")
    if not 0 <= v0 < g.n:
        raise BoundsError(f"target {v0} outside [0, {g.n})")
    na = normalize(g)
    if surrogate is None:
        if split is None:
            raise ValueError("need a trained surrogate or a split")
        surrogate = train_surrogate(
            g, na, split,
            surrogate_config(derive_seed(seed, "surrogate", 0), epochs))
    if adaptive and split is None:
        raise ValueError("adaptive refits need the split")
    if cooc is None:
        cooc = build_cooccurrence(g)

    if g.labels[v0] >= 0:
        c_old = int(g.labels[v0])
    else:
        c_old = int(predict(surrogate, g, na, np.asarray([v0]))[0])
    c_new = runner_up_class(surrogate, g, na, v0, c_old)
    w = feature_gradient(surrogate, c_old, c_new)

    rng = np.random.default_rng(derive_seed(seed, "features"))
    flags: dict = {}
    shared_feats: tuple[int, ...] = ()
    if budget.edge_only:
        flags["copied_features"] = True
    else:
        idx, short = optimal_features(w, cooc, budget.features_per_node)
        shared_feats = tuple(int(j) for j in idx)
        if short:
            log.warning("feature shortfall at target %d: wanted %d, got %d",
                        v0, budget.features_per_node, len(shared_feats))

    def pick_features():
        if budget.edge_only:
            src = int(rng.integers(g.n))
            flags.setdefault("copied_from", []).append(src)
            return _copied_row(g, src)
        return shared_feats

    n0, k = g.n, budget.num_nodes
    run = _FgsmRun(atil=np.zeros((n0 + k, n0 + k)),
                   deg=np.zeros(n0 + k), h=np.zeros(n0 + k), m=n0, trace=[])
    run.atil[:n0, :n0] = g.adjacency.toarray()
    np.fill_diagonal(run.atil[:n0, :n0], 1.0)
    run.deg[:n0] = na.degrees
    run.h[:n0] = g.features @ w
    run.record(v0)

    node_feats: list[tuple[int, ...]] = []
    c_new_trace = [c_new]
    spent = 0
    exhausted = False

    if strategy == "one_time":
        for _ in range(k):
            feats = pick_features()
            node_feats.append(feats)
            a = run.activate(float(np.sum(w[list(feats)])) if feats else 0.0)
            _flip(run.atil, run.deg, a, v0)
            spent += 1
            run.record(v0)
        owners = range(n0, n0 + k)
        while spent < budget.num_edges:
            best = _best_flip(run, v0, owners, indirect=False)
            if best is None or best[0] >= 0.0:
                exhausted = True
                break
            _, a, u = best
            _flip(run.atil, run.deg, a, u)
            spent += 1
            run.record(v0)
    else:
        injected_so_far: list[InjectedNode] = []
        for t, d_in in enumerate(budget.degrees):
            if adaptive and t > 0:
                graph_cur = apply_perturbation(
                    g, Perturbation(injected=tuple(injected_so_far)))
                na_cur = normalize(graph_cur)
                cfg = surrogate_config(derive_seed(seed, "surrogate", t),
                                       epochs)
                surrogate = train_surrogate(graph_cur, na_cur, split, cfg)
                c_new = runner_up_class(surrogate, graph_cur, na_cur, v0,
                                        c_old)
                w = feature_gradient(surrogate, c_old, c_new)
                run.h[:n0] = g.features @ w
                for i, fs in enumerate(node_feats):
                    run.h[n0 + i] = float(np.sum(w[list(fs)])) if fs else 0.0
                if not budget.edge_only:
                    idx, _ = optimal_features(w, cooc,
                                              budget.features_per_node)
                    shared_feats = tuple(int(j) for j in idx)
            c_new_trace.append(int(c_new))
            feats = pick_features()
            node_feats.append(feats)
            a = run.activate(float(np.sum(w[list(feats)])) if feats else 0.0)
            remaining = d_in
            if budget.mode == "direct":
                _flip(run.atil, run.deg, a, v0)
                spent += 1
                remaining -= 1
                run.record(v0)
            for _ in range(remaining):
                best = _best_flip(run, v0, [a], budget.mode == "indirect")
                if best is None or best[0] >= 0.0:
                    exhausted = True
                    break
                _, _, u = best
                _flip(run.atil, run.deg, a, u)
                spent += 1
                run.record(v0)
            nbrs = np.flatnonzero(run.atil[a, :a] == 1.0)
            injected_so_far.append(InjectedNode(
                neighbors=tuple(int(u) for u in nbrs), features=feats))
            if exhausted:
                break
        c_new_trace = c_new_trace[1:]  # one entry per injected node

    if exhausted:
        flags["improvement_exhausted"] = budget.num_edges - spent
        log.info("flip search exhausted with %d edges unspent",
                 budget.num_edges - spent)

    if strategy == "one_time":
        injected = []
        for t in range(k):
            a = n0 + t
            nbrs = np.flatnonzero(run.atil[a, :a] == 1.0)
            injected.append(InjectedNode(
                neighbors=tuple(int(u) for u in nbrs),
                features=node_feats[t]))
    else:
        injected = injected_so_far

    if not budget.edge_only:
        undersized = {str(t): len(node.features)
                      for t, node in enumerate(injected)
                      if len(node.features) < budget.features_per_node}
        if undersized:
            flags["feature_shortfall"] = undersized

    meta = {
        "attack": "fgsm",
        "strategy": strategy,
        "adaptive": bool(adaptive),
        "target": int(v0),
        "mode": budget.mode,
        "seed": int(seed),
        "budget": budget.to_dict(),
        "c_old": int(c_old),
        "c_new": ([int(c) for c in c_new_trace] if adaptive
                  else int(c_new)),
        "loss_trace": [float(x) for x in run.trace],
        "flags": flags,
    }
    p = Perturbation(injected=tuple(injected), meta=meta)
    report = check_constraints(g, p, budget, cooc)
    if not report.ok:
        log.warning("constraint audit failed:\n%s", "\n".join(report.lines()))
    return AttackResult(perturbation=p, report=report)
