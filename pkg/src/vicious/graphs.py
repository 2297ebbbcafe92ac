"""Sparse graph container, normalization, and node-injection plumbing.

Adjacency and feature matrices live in CSR form throughout. A Graph is
immutable once built: attacks describe their edits as Perturbation values and
apply_perturbation materializes a fresh graph, so the clean graph can be
shared freely between concurrent evaluations.

Conventions: undirected simple graphs, 0-based node and feature indices,
binary features, labels as small non-negative ints with -1 meaning
"unlabeled". The normalized operator is D^-1/2 (A + I) D^-1/2 with
D_ii = 1 + degree(i).
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)


class GraphError(ValueError):
    """Malformed graph data."""


class ParseError(GraphError):
    """Unreadable input line; the message carries path and line number."""


class BoundsError(GraphError):
    """Index outside the valid range."""


class PerturbationError(GraphError):
    """Structurally invalid perturbation."""


class BudgetError(GraphError):
    """Inconsistent attack budget."""


# ---------------------------------------------------------------- graph type


def _canonical_binary_csr(m, shape, name: str) -> sp.csr_matrix:
    m = sp.csr_matrix(m, shape=shape, dtype=np.float64, copy=True)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    if m.nnz and not np.all(m.data == 1.0):
        raise GraphError(f"{name} must be binary (all stored entries 1.0)")
    for arr in (m.data, m.indices, m.indptr):
        arr.setflags(write=False)
    return m


@dataclass(frozen=True)
class Graph:
    """Immutable undirected graph with binary node features.

    Attributes
    ----------
    adjacency : csr_matrix, shape (n, n)
        Symmetric, binary, zero diagonal.
    features : csr_matrix, shape (n, d)
        Binary feature indicators.
    labels : ndarray of int64, shape (n,)
        Class per node, -1 where unlabeled.
    num_classes : int
    """

    adjacency: sp.csr_matrix
    features: sp.csr_matrix
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        a = self.adjacency
        if a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got {a.shape}")
        n = a.shape[0]
        if a.diagonal().any():
            raise GraphError("adjacency has nonzero diagonal (self-loops)")
        if (a - a.T).count_nonzero():
            raise GraphError("adjacency is not symmetric")
        if self.features.shape[0] != n:
            raise GraphError(
                f"feature rows ({self.features.shape[0]}) != node count ({n})")
        if self.labels.shape != (n,):
            raise GraphError(f"labels must have shape ({n},)")
        if self.labels.size:
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < -1:
                raise GraphError("labels below -1")
            if hi >= 0 and hi >= self.num_classes:
                raise GraphError(
                    f"label {hi} outside num_classes={self.num_classes}")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(np.int64)


def make_graph(adjacency, features, labels, num_classes: int,
               n: int | None = None, d: int | None = None) -> Graph:
    """Canonicalize inputs (sorted indices, merged duplicates, frozen
    buffers) and build a validated Graph."""
    if n is None:
        n = sp.csr_matrix(adjacency).shape[0]
    adjacency = _canonical_binary_csr(adjacency, (n, n), "adjacency")
    if d is None:
        d = sp.csr_matrix(features).shape[1]
    features = _canonical_binary_csr(features, (n, d), "features")
    labels = np.asarray(labels, dtype=np.int64).copy()
    labels.setflags(write=False)
    return Graph(adjacency, features, labels, int(num_classes))


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class Split:
    """Disjoint train/validation/test node index sets (sorted arrays)."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr = np.sort(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        total = len(self.train) + len(self.val) + len(self.test)
        merged = np.concatenate([self.train, self.val, self.test])
        if len(np.unique(merged)) != total:
            raise GraphError("split parts overlap")


def random_split(g: Graph, seed: int, train_frac: float = 0.1,
                 val_frac: float = 0.1) -> Split:
    """Seeded split: train and val are sampled from labeled nodes only
    (train_frac and val_frac of all n nodes), everything else is test."""
    labeled = np.flatnonzero(g.labels >= 0)
    n_train = int(round(g.n * train_frac))
    n_val = int(round(g.n * val_frac))
    if n_train + n_val > len(labeled):
        raise GraphError(
            f"need {n_train + n_val} labeled nodes for train+val, "
            f"have {len(labeled)}")
    if n_train < 1 or n_val < 1:
        raise GraphError("split fractions leave train or val empty")
    order = np.random.default_rng(seed).permutation(labeled)
    train = order[:n_train]
    val = order[n_train:n_train + n_val]
    rest = np.setdiff1d(np.arange(g.n), np.concatenate([train, val]))
    return Split(train=train, val=val, test=rest)


# ---------------------------------------------------------------- normalize


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Ahat = D^-1/2 (A + I) D^-1/2 with its degree vector (1 + degree)."""

    ahat: sp.csr_matrix
    degrees: np.ndarray  # float64, d_i = 1 + degree(i)


def normalize(g: Graph) -> NormalizedAdjacency:
    """Build the renormalized operator.

    The entry value is computed as 1/sqrt(d_i * d_j) from the same float
    product for both (i, j) and (j, i), so symmetry holds bitwise, not just
    within rounding.
    """
    deg = np.asarray(g.adjacency.sum(axis=1)).ravel() + 1.0
    coo = g.adjacency.tocoo()
    diag = np.arange(g.n)
    rows = np.concatenate([coo.row, diag])
    cols = np.concatenate([coo.col, diag])
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    ahat = sp.csr_matrix((vals, (rows, cols)), shape=(g.n, g.n))
    ahat.sort_indices()
    for arr in (ahat.data, ahat.indices, ahat.indptr):
        arr.setflags(write=False)
    deg.setflags(write=False)
    return NormalizedAdjacency(ahat=ahat, degrees=deg)


def ahat_row(na: NormalizedAdjacency, i: int) -> sp.csr_matrix:
    """Row i of Ahat as a 1 x n sparse matrix."""
    n = na.ahat.shape[0]
    if not 0 <= i < n:
        raise BoundsError(f"node {i} outside [0, {n})")
    return na.ahat[i]


def ahat_sq_row(na: NormalizedAdjacency, i: int) -> sp.csr_matrix:
    """Row i of Ahat^2, computed as a sparse row-times-matrix product
    (touches only the two-hop neighborhood, never the full square)."""
    return ahat_row(na, i) @ na.ahat


# ---------------------------------------------------------------- components


def largest_connected_component(g: Graph) -> tuple[Graph, np.ndarray]:
    """Restrict to the largest connected component.

    Returns the sub-graph (original relative node order preserved) and a
    length-n remapping array, old index -> new index or -1 for dropped
    nodes. Ties between equal-size components go to the one containing the
    lowest original node index. Applying this twice is a no-op.
    """
    if g.n == 0:
        return g, np.empty(0, dtype=np.int64)
    ncomp, comp = connected_components(g.adjacency, directed=False)
    sizes = np.bincount(comp, minlength=ncomp)
    # component ids are assigned in order of first appearance, so argmax's
    # first-winner rule implements the lowest-index tie-break
    best = int(sizes.argmax())
    keep = np.flatnonzero(comp == best)
    node_map = np.full(g.n, -1, dtype=np.int64)
    node_map[keep] = np.arange(len(keep))
    sub = make_graph(
        g.adjacency[keep][:, keep], g.features[keep], g.labels[keep],
        g.num_classes, n=len(keep), d=g.num_features)
    dropped = g.n - len(keep)
    if dropped:
        log.info("largest_connected_component: dropped %d of %d nodes",
                 dropped, g.n)
    return sub, node_map


# ---------------------------------------------------------------- budgets


@dataclass(frozen=True)
class Budget:
    """Attack budget: how many nodes may be injected, how many edges they
    may carry in total, and the per-node feature count.

    degrees fixes each injected node's edge allowance up front (sums to
    num_edges). mode selects whether the target itself may be an endpoint
    ("direct" pre-commits one slot per node to the target, "indirect"
    forbids touching it). edge_only replaces gradient-chosen features with
    a copy of a sampled original node's features.
    """

    num_nodes: int
    num_edges: int
    features_per_node: int
    degrees: tuple[int, ...]
    mode: str = "direct"
    edge_only: bool = False

    def __post_init__(self):
        if self.mode not in ("direct", "indirect"):
            raise BudgetError(f"unknown mode {self.mode!r}")
        if self.num_nodes < 0 or self.num_edges < 0:
            raise BudgetError("negative budget")
        if len(self.degrees) != self.num_nodes:
            raise BudgetError(
                f"{len(self.degrees)} degrees for {self.num_nodes} nodes")
        if sum(self.degrees) != self.num_edges:
            raise BudgetError(
                f"degrees sum {sum(self.degrees)} != edge budget {self.num_edges}")
        if any(d < 1 for d in self.degrees):
            raise BudgetError("every injected node needs degree >= 1")
        if self.num_nodes and self.features_per_node < 1:
            raise BudgetError("features_per_node must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "num_edges": self.num_edges,
            "features_per_node": self.features_per_node,
            "degrees": list(self.degrees),
            "mode": self.mode,
            "edge_only": self.edge_only,
        }

    @staticmethod
    def from_dict(d: dict) -> "Budget":
        return Budget(
            num_nodes=int(d["num_nodes"]), num_edges=int(d["num_edges"]),
            features_per_node=int(d["features_per_node"]),
            degrees=tuple(int(x) for x in d["degrees"]),
            mode=str(d["mode"]), edge_only=bool(d["edge_only"]))


def feature_budget(g: Graph) -> int:
    """Per-node feature allowance: average nonzero feature count over the
    graph, rounded to nearest, never below 1."""
    if g.n == 0:
        return 1
    return max(1, round(g.features.nnz / g.n))


# ---------------------------------------------------------------- perturbations


@dataclass(frozen=True)
class InjectedNode:
    """One injected node: neighbor indices into the graph as it existed at
    injection time (earlier injected nodes included), plus feature indices."""

    neighbors: tuple[int, ...]
    features: tuple[int, ...]


@dataclass(frozen=True)
class Perturbation:
    """Ordered list of injected nodes plus attack metadata (target, mode,
    seed, budget, flags). The clean graph is never part of this value."""

    injected: tuple[InjectedNode, ...]
    meta: dict = field(default_factory=dict)

    def edge_count(self) -> int:
        """Edges spent. Each injected edge is recorded exactly once, so
        vicious-vicious edges count once as well."""
        return sum(len(node.neighbors) for node in self.injected)

    def to_dict(self) -> dict:
        return {
            "injected": [
                {"neighbors": list(v.neighbors), "features": list(v.features)}
                for v in self.injected
            ],
            "meta": self.meta,
        }

    @staticmethod
    def from_dict(d: dict) -> "Perturbation":
        injected = tuple(
            InjectedNode(neighbors=tuple(int(u) for u in v["neighbors"]),
                         features=tuple(int(f) for f in v["features"]))
            for v in d["injected"])
        return Perturbation(injected=injected, meta=dict(d.get("meta", {})))


def save_perturbation(p: Perturbation, path) -> None:
    with open(path, "w") as fh:
        json.dump(p.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_perturbation(path) -> Perturbation:
    with open(path) as fh:
        return Perturbation.from_dict(json.load(fh))


def apply_perturbation(g: Graph, p: Perturbation) -> Graph:
    """Materialize the perturbed graph: injected nodes appended in order,
    each edge added symmetrically, features stacked, labels extended with
    -1. The input graph is untouched.

    Raises PerturbationError/BoundsError for duplicate endpoints, indices
    past the graph as it existed at that node's injection point, self
    edges, or feature indices outside [0, d).
    """
    n, d = g.n, g.num_features
    k = len(p.injected)
    erow, ecol, frow, fcol = [], [], [], []
    for t, node in enumerate(p.injected):
        idx = n + t
        seen = set()
        for u in node.neighbors:
            u = int(u)
            if not 0 <= u < idx:
                raise BoundsError(
                    f"injected node {t}: endpoint {u} invalid "
                    f"(graph had {idx} nodes at injection)")
            if u in seen:
                raise PerturbationError(
                    f"injected node {t}: duplicate endpoint {u}")
            seen.add(u)
            erow += [idx, u]
            ecol += [u, idx]
        fseen = set()
        for j in node.features:
            j = int(j)
            if not 0 <= j < d:
                raise BoundsError(
                    f"injected node {t}: feature {j} outside [0, {d})")
            if j in fseen:
                raise PerturbationError(
                    f"injected node {t}: duplicate feature {j}")
            fseen.add(j)
            frow.append(t)
            fcol.append(j)

    m = n + k
    base = g.adjacency.tocoo()
    rows = np.concatenate([base.row, np.asarray(erow, dtype=np.int64)])
    cols = np.concatenate([base.col, np.asarray(ecol, dtype=np.int64)])
    vals = np.ones(len(rows), dtype=np.float64)
    adjacency = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))

    extra = sp.csr_matrix(
        (np.ones(len(frow)), (frow, fcol)), shape=(k, d))
    features = sp.vstack([g.features, extra], format="csr")
    labels = np.concatenate([g.labels, np.full(k, -1, dtype=np.int64)])
    return make_graph(adjacency, features, labels, g.num_classes, n=m, d=d)


# ---------------------------------------------------------------- co-occurrence


@dataclass(frozen=True)
class CooccurrenceIndex:
    """Which feature pairs appear together on at least one original node.

    Backed by the boolean pattern of X^T X; the diagonal doubles as an
    "occurs at all" indicator, so features absent from every node are never
    admissible."""

    pairs: sp.csr_matrix  # d x d boolean pattern

    @property
    def num_features(self) -> int:
        return self.pairs.shape[0]

    def occurs(self, j: int) -> bool:
        return bool(self.pairs[j, j])

    def allowed(self, i: int, j: int) -> bool:
        """True when features i and j may share a node."""
        return bool(self.pairs[i, j])

    def partners(self, j: int) -> np.ndarray:
        """Sorted feature indices that co-occur with j (includes j itself
        when j occurs anywhere)."""
        row = self.pairs[j]
        return row.indices.astype(np.int64)


def build_cooccurrence(g: Graph) -> CooccurrenceIndex:
    x = g.features
    pairs = (x.T @ x).tocsr()
    pairs.sum_duplicates()
    pairs.data = np.ones_like(pairs.data)
    pairs.sort_indices()
    return CooccurrenceIndex(pairs=pairs)


# ---------------------------------------------------------------- audit


@dataclass(frozen=True)
class RuleCheck:
    name: str
    ok: bool
    detail: str


@dataclass(frozen=True)
class ConstraintReport:
    ok: bool
    rules: tuple[RuleCheck, ...]

    def lines(self) -> list[str]:
        return [f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}"
                for r in self.rules]


def _original_row_sets(g: Graph) -> set:
    rows = set()
    x = g.features
    for i in range(g.n):
        rows.add(tuple(x.indices[x.indptr[i]:x.indptr[i + 1]]))
    return rows


def check_constraints(g: Graph, p: Perturbation, budget: Budget,
                      cooc: CooccurrenceIndex) -> ConstraintReport:
    """Audit a perturbation against the clean graph and its budget.

    Checks: node and edge budgets, endpoint validity at injection time,
    per-node feature count (copied rows must match an original node
    exactly; recorded shortfalls are acknowledged but flagged), feature
    pair co-occurrence, and the indirect-mode ban on touching the target
    (read from perturbation metadata).
    """
    rules = []
    flags = p.meta.get("flags", {})

    k = len(p.injected)
    rules.append(RuleCheck(
        "node_budget", k <= budget.num_nodes,
        f"{k} injected <= {budget.num_nodes}"))

    total = p.edge_count()
    rules.append(RuleCheck(
        "edge_budget", total <= budget.num_edges,
        f"{total} edges <= {budget.num_edges}"))

    ok, detail = True, "endpoints and features well-formed"
    for t, node in enumerate(p.injected):
        limit = g.n + t
        if len(set(node.neighbors)) != len(node.neighbors):
            ok, detail = False, f"node {t}: duplicate endpoint"
            break
        if any(not 0 <= u < limit for u in node.neighbors):
            ok, detail = False, f"node {t}: endpoint outside [0, {limit})"
            break
        if len(set(node.features)) != len(node.features):
            ok, detail = False, f"node {t}: duplicate feature"
            break
        if any(not 0 <= j < g.num_features for j in node.features):
            ok, detail = False, f"node {t}: feature index out of range"
            break
    rules.append(RuleCheck("endpoint_validity", ok, detail))

    copied = budget.edge_only or flags.get("copied_features", False)
    shortfall = {int(t): int(c)
                 for t, c in flags.get("feature_shortfall", {}).items()}
    if copied:
        originals = _original_row_sets(g)
        bad = [t for t, node in enumerate(p.injected)
               if tuple(sorted(node.features)) not in originals]
        rules.append(RuleCheck(
            "feature_count", not bad,
            "copied rows match an original node" if not bad
            else f"node {bad[0]}: features match no original node"))
    else:
        ok, detail = True, f"every node carries {budget.features_per_node} features"
        for t, node in enumerate(p.injected):
            c = len(node.features)
            if c == budget.features_per_node:
                continue
            if t in shortfall and shortfall[t] == c and c < budget.features_per_node:
                detail = f"shortfall acknowledged (node {t}: {c})"
                continue
            ok, detail = False, (
                f"node {t}: {c} features != {budget.features_per_node}")
            break
        rules.append(RuleCheck("feature_count", ok, detail))

    ok, detail = True, "all feature pairs co-occur on original nodes"
    for t, node in enumerate(p.injected):
        fs = node.features
        for a in range(len(fs)):
            for b in range(a + 1, len(fs)):
                if not cooc.allowed(fs[a], fs[b]):
                    ok, detail = False, (
                        f"node {t}: pair ({fs[a]}, {fs[b]}) never co-occurs")
                    break
            if not ok:
                break
        if not ok:
            break
    rules.append(RuleCheck("cooccurrence", ok, detail))

    if budget.mode == "indirect":
        target = p.meta.get("target")
        if target is None:
            rules.append(RuleCheck(
                "indirect_mode", k == 0, "target unknown (missing metadata)"))
        else:
            touched = [t for t, node in enumerate(p.injected)
                       if int(target) in node.neighbors]
            rules.append(RuleCheck(
                "indirect_mode", not touched,
                "target untouched" if not touched
                else f"node {touched[0]} touches target {target}"))

    return ConstraintReport(ok=all(r.ok for r in rules), rules=tuple(rules))
