"""Delimited-file input and output for graphs and splits.

File formats (tab or space separated, '#' starts a comment, blank lines
ignored, all indices 0-based):

  edges:     one "u v" line per undirected edge
  features:  one "node feature" line per nonzero entry
  labels:    one "node class" line per labeled node
  split:     one "node part" line, part in {train, val, test}

Node count n and feature count d are inferred as 1 + max index seen.
Self-loops are dropped at load with a logged count, duplicate edges are
collapsed, and edge files may list either or both directions.
"""

import logging
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graphs import BoundsError, Graph, ParseError, Split, make_graph

log = logging.getLogger(__name__)


def _read_pairs(path) -> list[tuple[int, int]]:
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ParseError(
                    f"{path}:{lineno}: expected two fields, got {len(fields)}")
            try:
                a, b = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: non-integer field in {line!r}") from None
            if a < 0 or b < 0:
                raise BoundsError(f"{path}:{lineno}: negative index")
            pairs.append((a, b))
    return pairs


def load_graph(edges_path, features_path=None, labels_path=None) -> Graph:
    """Read a graph from delimited files.

    Parameters
    ----------
    edges_path : path to the edge list (required; may be empty).
    features_path : optional path to feature nonzeros (d = 0 when absent).
    labels_path : optional path to node labels.
    """
    edges = _read_pairs(edges_path)
    feats = _read_pairs(features_path) if features_path else []
    labels_raw = _read_pairs(labels_path) if labels_path else []

    n = 0
    for u, v in edges:
        n = max(n, u + 1, v + 1)
    for u, _ in feats:
        n = max(n, u + 1)
    for u, _ in labels_raw:
        n = max(n, u + 1)
    if n == 0:
        raise ParseError(f"{edges_path}: no nodes found in any input file")
    d = max((j + 1 for _, j in feats), default=0)

    loops = sum(1 for u, v in edges if u == v)
    if loops:
        log.info("load_graph: dropped %d self-loop(s) from %s", loops, edges_path)
    pairs = {(min(u, v), max(u, v)) for u, v in edges if u != v}
    if pairs:
        arr = np.array(sorted(pairs), dtype=np.int64)
        rows = np.concatenate([arr[:, 0], arr[:, 1]])
        cols = np.concatenate([arr[:, 1], arr[:, 0]])
        adjacency = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(n, n))
    else:
        adjacency = sp.csr_matrix((n, n), dtype=np.float64)

    if feats:
        farr = np.array(feats, dtype=np.int64)
        features = sp.csr_matrix(
            (np.ones(len(farr)), (farr[:, 0], farr[:, 1])), shape=(n, d))
    else:
        features = sp.csr_matrix((n, d), dtype=np.float64)

    labels = np.full(n, -1, dtype=np.int64)
    for u, c in labels_raw:
        labels[u] = c
    num_classes = int(labels.max()) + 1 if labels_raw else 0
    return make_graph(adjacency, features, labels, num_classes, n=n, d=d)


def save_graph(g: Graph, edges_path, features_path=None, labels_path=None) -> None:
    """Write a graph back out in load_graph's formats (each edge once,
    lower endpoint first, sorted lines)."""
    coo = g.adjacency.tocoo()
    with open(edges_path, "w") as fh:
        fh.write("# u\tv\n")
        for u, v in sorted(zip(coo.row, coo.col)):
            if u < v:
                fh.write(f"{u}\t{v}\n")
    if features_path is not None:
        x = g.features.tocoo()
        with open(features_path, "w") as fh:
            fh.write("# node\tfeature\n")
            for u, j in sorted(zip(x.row, x.col)):
                fh.write(f"{u}\t{j}\n")
    if labels_path is not None:
        with open(labels_path, "w") as fh:
            fh.write("# node\tclass\n")
            for u in range(g.n):
                if g.labels[u] >= 0:
                    fh.write(f"{u}\t{g.labels[u]}\n")


_PARTS = ("train", "val", "test")


def load_split(path, n: int) -> Split:
    """Read a split file. Nodes not listed fall into test."""
    assigned = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ParseError(
                    f"{path}:{lineno}: expected 'node part', got {line!r}")
            try:
                u = int(fields[0])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer node") from None
            part = fields[1].lower()
            if part not in _PARTS:
                raise ParseError(
                    f"{path}:{lineno}: part must be one of {_PARTS}, "
                    f"got {fields[1]!r}")
            if not 0 <= u < n:
                raise BoundsError(f"{path}:{lineno}: node {u} outside [0, {n})")
            if u in assigned:
                raise ParseError(f"{path}:{lineno}: node {u} listed twice")
            assigned[u] = part
    buckets = {part: [] for part in _PARTS}
    for u in range(n):
        buckets[assigned.get(u, "test")].append(u)
    return Split(train=np.array(buckets["train"], dtype=np.int64),
                 val=np.array(buckets["val"], dtype=np.int64),
                 test=np.array(buckets["test"], dtype=np.int64))


def save_split(split: Split, path) -> None:
    with open(path, "w") as fh:
        fh.write("# node\tpart\n")
        rows = [(int(u), part)
                for part in _PARTS for u in getattr(split, part)]
        for u, part in sorted(rows):
            fh.write(f"{u}\t{part}\n")


def dataset_paths(root) -> dict:
    """Conventional layout under a dataset directory: edges.tsv,
    features.tsv, labels.tsv, and optionally split.tsv."""
    root = Path(root)
    paths = {
        "edges": root / "edges.tsv",
        "features": root / "features.tsv",
        "labels": root / "labels.tsv",
    }
    split = root / "split.tsv"
    if split.exists():
        paths["split"] = split
    return paths
