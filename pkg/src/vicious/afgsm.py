"""Greedy node injection against a linearized graph convolution surrogate.

The attacker appends new nodes (never editing existing ones) to push one
target node across a decision boundary.  Features come from the sign of a
class-difference weight vector, edges from a closed-form gradient of the
surrogate margin at the target, evaluated under a degree-preserving
approximation: the new node's normalizer is frozen at its final value
1 + d_in, so neither choice requires retraining or dense algebra.

With the target-link indicator fixed, the approximate margin is affine in
the remaining link indicators, which makes "take the d_in most negative
gradient entries" exact for the approximation rather than a heuristic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graphs import (
    BoundsError,
    Budget,
    BudgetError,
    ConstraintReport,
    CooccurrenceIndex,
    Graph,
    InjectedNode,
    NormalizedAdjacency,
    Perturbation,
    apply_perturbation,
    build_cooccurrence,
    check_constraints,
    normalize,
)
from .models import (
    SurrogateModel,
    attack_loss,
    predict,
    runner_up_class,
    surrogate_config,
    train_surrogate,
)
from .util import derive_seed

log = logging.getLogger(__name__)

__all__ = [
    "AttackResult",
    "AttackState",
    "approx_loss_shift",
    "assign_degrees",
    "edge_gradient",
    "feature_gradient",
    "inject_one",
    "optimal_edges",
    "optimal_features",
    "run_afgsm",
    "run_afgsm_ada",
]


# ---------------------------------------------------------------- results


@dataclass(frozen=True)
class AttackResult:
    """A finished attack: the perturbation plus its constraint audit."""

    perturbation: Perturbation
    report: ConstraintReport

    @property
    def ok(self) -> bool:
        return self.report.ok


@dataclass
class AttackState:
    """Mutable loop state for one attack run.

    graph/na track the perturbed graph as nodes land; clean stays the
    original. c_new, w and features are refreshed per injection by the
    adaptive variant and fixed otherwise.
    """

    clean: Graph
    graph: Graph
    na: NormalizedAdjacency
    surrogate: SurrogateModel
    v0: int
    c_old: int
    c_new: int
    w: np.ndarray
    features: tuple[int, ...]
    budget: Budget
    cooc: CooccurrenceIndex
    rng: np.random.Generator
    losses: list = field(default_factory=list)
    injected: list = field(default_factory=list)
    c_new_trace: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)


# ---------------------------------------------------------------- budget


def assign_degrees(num_nodes: int, num_edges: int, scheme: str = "even",
                   seed: int | None = None) -> tuple[int, ...]:
    """Split an edge budget into per-node degrees, each at least 1.

    "even" spreads edges as evenly as possible, earlier nodes taking the
    remainder. "random" draws a uniform composition (needs a seed).
    """
    if num_nodes < 0 or num_edges < 0:
        raise BudgetError("budget counts cannot be negative")
    if num_nodes == 0:
        if num_edges:
            raise BudgetError(f"{num_edges} edges but no nodes to carry them")
        return ()
    if num_edges < num_nodes:
        raise BudgetError(
            f"{num_edges} edges cannot give {num_nodes} nodes one edge each")
    if scheme == "even":
        base, extra = divmod(num_edges, num_nodes)
        return tuple(base + (1 if i < extra else 0) for i in range(num_nodes))
    if scheme == "random":
        if seed is None:
            raise BudgetError("random degree scheme needs a seed")
        rng = np.random.default_rng(derive_seed(seed, "degrees"))
        cuts = np.sort(rng.choice(num_edges - 1, size=num_nodes - 1,
                                  replace=False)) + 1
        bounds = np.concatenate(([0], cuts, [num_edges]))
        return tuple(int(x) for x in np.diff(bounds))
    raise BudgetError(f"unknown degree scheme {scheme!r}")


# ---------------------------------------------------------------- gradients


def feature_gradient(surrogate, c_old: int, c_new: int) -> np.ndarray:
    """Per-feature weight difference W[:, c_old] - W[:, c_new].

    Setting a feature with a negative entry lowers the margin of c_old
    over c_new at the target, up to a nonnegative structural scale shared
    by all features, so the sign pattern alone ranks candidates.
    """
    w = surrogate.weights if isinstance(surrogate, SurrogateModel) else surrogate
    k = w.shape[1]
    if not (0 <= c_old < k and 0 <= c_new < k):
        raise BoundsError(f"classes ({c_old}, {c_new}) outside [0, {k})")
    if c_old == c_new:
        raise BoundsError("old and new class coincide")
    return w[:, c_old] - w[:, c_new]


def injection_scale(na: NormalizedAdjacency, v0: int,
                    neighbors, d_in: int) -> float:
    """Nonnegative scalar turning the sign vector into the full feature
    gradient for a node with the given endpoints."""
    nbrs = np.asarray(sorted(set(int(u) for u in neighbors)), dtype=np.int64)
    din_t = float(d_in) + 1.0
    beta = 1.0 if v0 in nbrs else 0.0
    row = np.asarray(na.ahat[v0].todense()).ravel()
    reach = float(np.sum(row[nbrs] / np.sqrt(na.degrees[nbrs])))
    return (din_t ** -0.5) * (reach + beta / (din_t * np.sqrt(na.degrees[v0])))


def edge_gradient(g: Graph, na: NormalizedAdjacency, v0: int, features,
                  w: np.ndarray, d_in: int, direct: bool,
                  full: bool = False) -> np.ndarray:
    """Margin change per candidate endpoint for one injected node.

    Parameters
    ----------
    g, na : current (possibly already perturbed) graph and its operator.
    v0 : target node index.
    features : feature indices the node will carry.
    w : class-difference weights from feature_gradient.
    d_in : the node's final degree; its normalizer is 1 + d_in throughout.
    direct : whether the node links the target (fixes the beta term).
    full : include the positive prefix shared by every endpoint. The
        default drops it, which preserves signs and ordering; with it the
        entry at u equals, exactly, the approximate margin change of
        adding edge (new, u) while the target link stays fixed.

    Returns
    -------
    ndarray of shape (g.n,). The entry at v0 is never meaningful for
    selection: direct mode pre-commits that edge and indirect mode
    forbids it.
    """
    deg = na.degrees
    din_t = float(d_in) + 1.0
    xw = g.features @ w
    x_dot_w = float(np.sum(w[np.asarray(list(features), dtype=np.int64)])) \
        if len(features) else 0.0
    atil = np.asarray(g.adjacency[v0].todense()).ravel()
    atil[v0] += 1.0
    grad = (atil / deg) * x_dot_w
    if direct:
        grad += (din_t ** -0.5) * xw / np.sqrt(deg)
    if full:
        grad *= (din_t * deg[v0]) ** -0.5
    return grad


def approx_loss_shift(g: Graph, na: NormalizedAdjacency, v0: int,
                      neighbors, features, d_in: int,
                      w: np.ndarray) -> float:
    """Margin change the degree-preserving approximation predicts for one
    injected node with the given endpoints and features.

    Affine in each endpoint indicator once the target link is fixed; the
    full edge_gradient entries are its exact flip differences.
    """
    nbrs = np.asarray(sorted(set(int(u) for u in neighbors)), dtype=np.int64)
    if nbrs.size and (nbrs[0] < 0 or nbrs[-1] >= g.n):
        raise BoundsError(f"endpoint outside [0, {g.n})")
    din_t = float(d_in) + 1.0
    e_hat = np.zeros(g.n)
    e_hat[nbrs] = (din_t ** -0.5) / np.sqrt(na.degrees[nbrs])
    xw = g.features @ w
    x_dot_w = float(np.sum(w[np.asarray(list(features), dtype=np.int64)])) \
        if len(features) else 0.0
    ahat_v0 = np.asarray(na.ahat[v0].todense()).ravel()
    return float(e_hat[v0] * (e_hat @ xw)
                 + (e_hat @ ahat_v0 + e_hat[v0] / din_t) * x_dot_w)


# ---------------------------------------------------------------- selection


def optimal_features(w: np.ndarray, cooc: CooccurrenceIndex,
                     count: int) -> tuple[np.ndarray, int]:
    """Greedy feature pick: most negative weights first, kept mutually
    co-occurring.

    Candidates are entries with w < 0 (zero helps nothing and is
    excluded), visited in ascending (weight, index) order. A feature is
    admitted when it occurs on some original node and co-occurs with
    everything already chosen, so the result is always a clique of the
    co-occurrence graph; among cliques of its size it is the one whose
    sorted weight tuple comes first.

    Returns
    -------
    (indices, shortfall) : sorted chosen indices and how many of the
    requested count could not be filled.
    """
    if count < 0:
        raise BudgetError("feature count cannot be negative")
    d = cooc.num_features
    if w.shape != (d,):
        raise BoundsError(f"weight vector length {w.shape} != ({d},)")
    cand = np.flatnonzero(w < 0.0)
    order = cand[np.lexsort((cand, w[cand]))]
    allowed = np.asarray(cooc.pairs.diagonal() > 0).ravel()
    chosen: list[int] = []
    for j in order:
        if len(chosen) == count:
            break
        if not allowed[j]:
            continue
        chosen.append(int(j))
        mask = np.zeros(d, dtype=bool)
        mask[cooc.partners(j)] = True
        allowed &= mask
    chosen_arr = np.sort(np.asarray(chosen, dtype=np.int64))
    return chosen_arr, count - len(chosen)


def optimal_edges(gradient: np.ndarray, d_in: int, v0: int,
                  direct: bool) -> np.ndarray:
    """Endpoints for one injected node: the d_in smallest gradient
    entries, ties to the lower index. Direct mode pre-commits the target
    and fills d_in - 1 slots from the rest; indirect mode never touches
    it."""
    n = gradient.shape[0]
    if d_in < 1:
        raise BudgetError("every injected node needs at least one edge")
    order = np.lexsort((np.arange(n), gradient))
    order = order[order != v0]
    take = d_in - 1 if direct else d_in
    if take > order.size:
        raise BudgetError(
            f"degree {d_in} exceeds the {order.size} available endpoints")
    chosen = order[:take]
    if direct:
        chosen = np.append(chosen, v0)
    return np.sort(chosen.astype(np.int64))


# ---------------------------------------------------------------- the loop


def _start(g: Graph, surrogate: SurrogateModel, v0: int, budget: Budget,
           seed: int, cooc: CooccurrenceIndex | None) -> AttackState:
    if not 0 <= v0 < g.n:
        raise BoundsError(f"target {v0} outside [0, {g.n})")
    na = normalize(g)
    if g.labels[v0] >= 0:
        c_old = int(g.labels[v0])
    else:
        c_old = int(predict(surrogate, g, na, np.asarray([v0]))[0])
    c_new = runner_up_class(surrogate, g, na, v0, c_old)
    w = feature_gradient(surrogate, c_old, c_new)
    if cooc is None:
        cooc = build_cooccurrence(g)
    flags: dict = {}
    feats: tuple[int, ...] = ()
    if budget.edge_only:
        flags["copied_features"] = True
    else:
        idx, short = optimal_features(w, cooc, budget.features_per_node)
        feats = tuple(int(j) for j in idx)
        if short:
            log.warning("feature shortfall at target %d: wanted %d, got %d",
                        v0, budget.features_per_node, len(feats))
    state = AttackState(
        clean=g, graph=g, na=na, surrogate=surrogate, v0=v0, c_old=c_old,
        c_new=c_new, w=w, features=feats, budget=budget, cooc=cooc,
        rng=np.random.default_rng(derive_seed(seed, "features")),
        flags=flags)
    state.losses.append(attack_loss(surrogate, g, na, v0, c_old, c_new))
    return state


def inject_one(state: AttackState, d_in: int) -> InjectedNode:
    """Choose and append one node onto the state's current graph, then
    record the exact surrogate margin on the updated graph."""
    direct = state.budget.mode == "direct"
    if state.budget.edge_only:
        src = int(state.rng.integers(state.clean.n))
        x = state.clean.features[src]
        feats = tuple(int(j) for j in x.indices)
        state.flags.setdefault("copied_from", []).append(src)
    else:
        feats = state.features
    grad = edge_gradient(state.graph, state.na, state.v0, feats, state.w,
                         d_in, direct)
    nbrs = optimal_edges(grad, d_in, state.v0, direct)
    node = InjectedNode(neighbors=tuple(int(u) for u in nbrs), features=feats)
    state.graph = apply_perturbation(state.graph,
                                     Perturbation(injected=(node,)))
    state.na = normalize(state.graph)
    state.injected.append(node)
    state.losses.append(attack_loss(state.surrogate, state.graph, state.na,
                                    state.v0, state.c_old, state.c_new))
    return node


def _finish(state: AttackState, name: str, seed: int,
            adaptive: bool) -> AttackResult:
    f = state.budget.features_per_node
    if not state.budget.edge_only:
        short = {str(t): len(node.features)
                 for t, node in enumerate(state.injected)
                 if len(node.features) < f}
        if short:
            state.flags["feature_shortfall"] = short
    meta = {
        "attack": name,
        "target": int(state.v0),
        "mode": state.budget.mode,
        "seed": int(seed),
        "budget": state.budget.to_dict(),
        "c_old": int(state.c_old),
        "c_new": ([int(c) for c in state.c_new_trace] if adaptive
                  else int(state.c_new)),
        "loss_trace": [float(x) for x in state.losses],
        "flags": state.flags,
    }
    p = Perturbation(injected=tuple(state.injected), meta=meta)
    report = check_constraints(state.clean, p, state.budget, state.cooc)
    if not report.ok:
        log.warning("constraint audit failed:\n%s", "\n".join(report.lines()))
    return AttackResult(perturbation=p, report=report)


def run_afgsm(g: Graph, surrogate: SurrogateModel, v0: int, budget: Budget,
              seed: int, cooc: CooccurrenceIndex | None = None) -> AttackResult:
    """Inject budget.num_nodes nodes against target v0, one pass, no
    retraining.

    The flipped class is the surrogate's runner-up on the clean graph and
    the feature set is chosen once up front; each node's endpoints are
    chosen on the graph as it stands, so degrees of earlier injected
    nodes are current. meta carries target, mode, seed, budget, both
    classes, the exact margin after each injection (entry 0 is clean) and
    any flags; the result embeds a constraint audit against the clean
    graph.

    Parameters
    ----------
    g : clean graph.
    surrogate : trained linear surrogate whose margin is attacked.
    v0 : target node.
    budget : node/edge/feature allowance, mode and edge_only switch.
    seed : run seed; only the edge_only feature sampling consumes it.
    cooc : optional prebuilt co-occurrence index for g.
    """
    state = _start(g, surrogate, v0, budget, seed, cooc)
    for d_in in budget.degrees:
        inject_one(state, d_in)
    return _finish(state, "afgsm", seed, adaptive=False)


def run_afgsm_ada(g: Graph, split, v0: int, budget: Budget, seed: int,
                  surrogate: SurrogateModel | None = None,
                  cooc: CooccurrenceIndex | None = None,
                  epochs: int = 200) -> AttackResult:
    """Adaptive variant: retrain the surrogate on the perturbed graph
    before every injection after the first, re-deriving the flipped
    class, weights and features each time.

    Injected nodes stay unlabeled, so the training rows are the original
    split throughout. meta["c_new"] is the per-injection list; the margin
    trace is recorded under whichever surrogate chose that node.
    """
    na = normalize(g)
    if surrogate is None:
        surrogate = train_surrogate(
            g, na, split,
            surrogate_config(derive_seed(seed, "surrogate", 0), epochs))
    state = _start(g, surrogate, v0, budget, seed, cooc)
    for t, d_in in enumerate(budget.degrees):
        if t > 0:
            cfg = surrogate_config(derive_seed(seed, "surrogate", t), epochs)
            state.surrogate = train_surrogate(state.graph, state.na, split,
                                              cfg)
            state.c_new = runner_up_class(state.surrogate, state.graph,
                                          state.na, v0, state.c_old)
            state.w = feature_gradient(state.surrogate, state.c_old,
                                       state.c_new)
            if not state.budget.edge_only:
                idx, short = optimal_features(state.w, state.cooc,
                                              state.budget.features_per_node)
                state.features = tuple(int(j) for j in idx)
        state.c_new_trace.append(int(state.c_new))
        inject_one(state, d_in)
    return _finish(state, "afgsm_ada", seed, adaptive=True)
