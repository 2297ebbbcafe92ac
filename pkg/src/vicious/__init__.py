"""Node-injection attacks on graph convolutional networks.

Library layout:

  graphs     sparse graph container, normalization, perturbations, audits
  datasets   delimited-file input/output
  models     linearized surrogate and two-layer GCN victim, training
  afgsm      approximate closed-form injection attack (plus adaptive variant)
  baselines  random and exact-gradient injection baselines
  harness    target selection, poisoning evaluation, synthetic graphs, timing
  figures    matplotlib rendering for harness output
  cli        command-line interface (train / attack / experiment / bench)
"""

__version__ = "0.1.0"

from .graphs import (  # noqa: F401
    Budget,
    ConstraintReport,
    CooccurrenceIndex,
    Graph,
    InjectedNode,
    NormalizedAdjacency,
    Perturbation,
    Split,
    apply_perturbation,
    build_cooccurrence,
    check_constraints,
    feature_budget,
    largest_connected_component,
    load_perturbation,
    make_graph,
    normalize,
    random_split,
    save_perturbation,
)
