"""Shared builders for the test suite."""

import numpy as np
import scipy.sparse as sp

from vicious.graphs import Graph, make_graph


def er_graph(seed, n, p=0.3, d=10, classes=3, feats_per_node=3,
             ensure_edge=True):
    """Random Erdos-Renyi style test graph.

    Returns (graph, edge_list) so oracles can work from the raw edges
    instead of the CSR representation under test.
    """
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)
             if rng.random() < p]
    if ensure_edge and not edges and n >= 2:
        edges = [(0, 1)]
    frow, fcol = [], []
    for i in range(n):
        k = min(feats_per_node, d)
        for j in rng.choice(d, size=k, replace=False):
            frow.append(i)
            fcol.append(int(j))
    labels = rng.integers(0, classes, size=n)
    return graph_from_parts(n, edges, d, list(zip(frow, fcol)), labels,
                            classes), edges


def graph_from_parts(n, edges, d, feature_pairs, labels, num_classes) -> Graph:
    if edges:
        arr = np.array(edges, dtype=np.int64)
        rows = np.concatenate([arr[:, 0], arr[:, 1]])
        cols = np.concatenate([arr[:, 1], arr[:, 0]])
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    else:
        adj = sp.csr_matrix((n, n), dtype=np.float64)
    if feature_pairs:
        fr = [u for u, _ in feature_pairs]
        fc = [j for _, j in feature_pairs]
        feats = sp.csr_matrix((np.ones(len(fr)), (fr, fc)), shape=(n, d))
    else:
        feats = sp.csr_matrix((n, d), dtype=np.float64)
    return make_graph(adj, feats, np.asarray(labels, dtype=np.int64),
                      num_classes, n=n, d=d)


def dense_ahat_oracle(edges, n):
    """Renormalized operator built densely from the raw edge list; the
    independent route for checking the sparse implementation."""
    a = np.zeros((n, n))
    for u, v in edges:
        a[u, v] = a[v, u] = 1.0
    atil = a + np.eye(n)
    deg = atil.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    return dinv[:, None] * atil * dinv[None, :]


def bfs_components_oracle(edges, n):
    """Connected components by hand BFS; returns list of sorted node lists."""
    adj = {i: [] for i in range(n)}
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen, comps = set(), []
    for start in range(n):
        if start in seen:
            continue
        queue, comp = [start], []
        seen.add(start)
        while queue:
            u = queue.pop()
            comp.append(u)
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        comps.append(sorted(comp))
    return comps
