import numpy as np

from sbmlab.graph_model import LabeledGraph


def random_tree(n, q, p, rng):
    """Uniform random recursive tree with random labels and planted modules."""
    parent = np.array([rng.integers(0, i) for i in range(1, n)], dtype=np.int64)
    child = np.arange(1, n, dtype=np.int64)
    edges = np.column_stack([np.minimum(parent, child), np.maximum(parent, child)]).reshape(-1, 2)
    labels = rng.integers(0, p, len(edges))
    return LabeledGraph(n, q, p, edges, labels, rng.integers(0, q, n))


def tv_max(a, b):
    return float(np.max(0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum(axis=1)))
