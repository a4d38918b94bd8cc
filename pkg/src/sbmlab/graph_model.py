"""Labeled stochastic block model: parametrization, sampling and scoring.

Modules and edge labels are 0-based internally (``0..q-1`` and ``0..p-1``).
The restricted affinity of label ``a`` is ``dc[a] * W + c_out[a]`` where the
strength ``x[a]`` in [0, 1] interpolates linearly between the bipartite-like
extreme (``c_in = 0``) and the fully separated extreme (``c_out = 0``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAX_OVERLAP_Q = 8


class PatternError(ValueError):
    """Raised for malformed modular patterns."""


class ParametrizationError(ValueError):
    """Raised when a parameter set implies an infeasible affinity matrix."""


# ---------------------------------------------------------------------------
# modular pattern


@dataclass(frozen=True)
class ModularPattern:
    """Binary symmetric indicator matrix ``W`` plus optional per-label patterns.

    ``lambda2`` is the magnitude of the leading eigenvalue of ``W`` on the
    subspace orthogonal to the all-ones vector when the row sums are equal
    (the all-ones vector is then the leading eigenvector), otherwise the
    second-largest eigenvalue magnitude.
    """

    W: np.ndarray
    per_label: Optional[tuple] = None
    lambda2: float = field(init=False)
    row_sum: Optional[int] = field(init=False)

    def __post_init__(self):
        W = _check_binary_symmetric(self.W, "W")
        object.__setattr__(self, "W", W)
        if self.per_label is not None:
            mats = tuple(_check_binary_symmetric(m, f"W[{a}]") for a, m in enumerate(self.per_label))
            if any(m.shape != W.shape for m in mats):
                raise PatternError("per-label patterns must share the shape of W")
            object.__setattr__(self, "per_label", mats)
        sums = W.sum(axis=1)
        equal = bool(np.all(sums == sums[0]))
        object.__setattr__(self, "row_sum", int(sums[0]) if equal else None)
        object.__setattr__(self, "lambda2", _second_eigenvalue(W, equal))

    @property
    def q(self) -> int:
        return self.W.shape[0]

    @property
    def equal_row_sums(self) -> bool:
        return self.row_sum is not None

    @property
    def has_common_pattern(self) -> bool:
        if self.per_label is None:
            return True
        return all(np.array_equal(m, self.W) for m in self.per_label)

    def label_matrix(self, alpha: int) -> np.ndarray:
        if self.per_label is None:
            return self.W
        return self.per_label[alpha]

    def label_matrices(self, p: int) -> np.ndarray:
        if self.per_label is not None and len(self.per_label) != p:
            raise PatternError(f"pattern defines {len(self.per_label)} label matrices, model has {p} labels")
        return np.stack([self.label_matrix(a) for a in range(p)]).astype(float)

    def omega(self, gamma: Sequence[float], alpha: Optional[int] = None) -> float:
        g = np.asarray(gamma, dtype=float)
        Wa = self.W if alpha is None else self.label_matrix(alpha)
        return float(g @ Wa @ g)


def _check_binary_symmetric(entries, name: str) -> np.ndarray:
    W = np.asarray(entries)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise PatternError(f"{name} must be a square matrix, got shape {W.shape}")
    if W.shape[0] < 2:
        raise PatternError(f"{name} needs at least two modules")
    if not np.all((W == 0) | (W == 1)):
        raise PatternError(f"{name} must be binary (entries in {{0, 1}})")
    W = W.astype(np.int64)
    if not np.array_equal(W, W.T):
        raise PatternError(f"{name} must be symmetric")
    W.setflags(write=False)
    return W


def _second_eigenvalue(W: np.ndarray, equal_rows: bool) -> float:
    q = W.shape[0]
    if equal_rows:
        proj = np.eye(q) - np.full((q, q), 1.0 / q)
        ev = np.linalg.eigvalsh(proj @ W @ proj)
        # the all-ones direction maps to one exact zero; it never dominates
        return float(np.max(np.abs(ev)))
    ev = np.sort(np.abs(np.linalg.eigvalsh(W.astype(float))))[::-1]
    return float(ev[1])


def make_pattern(entries, per_label=None) -> ModularPattern:
    return ModularPattern(np.asarray(entries), per_label=per_label)


def identity_pattern(q: int) -> ModularPattern:
    return ModularPattern(np.eye(q, dtype=np.int64))


# q=4 non-community pattern with a=2, Omega=1/2, lambda2=sqrt(2); one of several
# matrices with those invariants.
CHAIN4 = ((1, 1, 0, 0), (1, 0, 1, 0), (0, 1, 0, 1), (0, 0, 1, 1))


def chain4_pattern() -> ModularPattern:
    return ModularPattern(np.array(CHAIN4))


# ---------------------------------------------------------------------------
# parameters


def x_to_delta_c(x, c_label, omega):
    """Affinity gap ``c_in - c_out`` for strength ``x`` (vectorizes)."""
    omega = np.asarray(omega, dtype=float)
    if np.any((omega <= 0) | (omega >= 1)):
        raise ValueError(f"omega must lie in (0, 1), got {omega}")
    x = np.asarray(x, dtype=float)
    out = np.asarray(c_label, dtype=float) * (x / omega - 1.0) / (1.0 - omega)
    return float(out) if out.ndim == 0 else out


def delta_c_to_x(delta_c, c_label, omega):
    omega = np.asarray(omega, dtype=float)
    if np.any((omega <= 0) | (omega >= 1)):
        raise ValueError(f"omega must lie in (0, 1), got {omega}")
    out = omega * (1.0 + (1.0 - omega) * np.asarray(delta_c, dtype=float) / np.asarray(c_label, dtype=float))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ModelParams:
    """Module sizes ``gamma`` and, per label, mean degree ``c`` and strength ``x``.

    ``affinity`` optionally overrides the restricted parametrization with
    full ``(p, q, q)`` matrices; ``x`` must then hold the projection
    ``gamma' (c*W) gamma / gamma' c gamma`` (see :func:`project_strength`).
    """

    gamma: np.ndarray
    c: np.ndarray
    x: np.ndarray
    affinity: Optional[np.ndarray] = None

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float).ravel()
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if np.any(gamma < 0) or abs(gamma.sum() - 1.0) > 1e-9:
            raise ParametrizationError(f"gamma must be a probability vector, got {gamma}")
        if c.shape != x.shape:
            raise ParametrizationError("c and x need one entry per label")
        if np.any(c <= 0):
            raise ParametrizationError(f"mean degrees must be positive, got {c}")
        if np.any((x < 0) | (x > 1)):
            raise ParametrizationError(f"strengths must lie in [0, 1], got {x}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "x", x)
        if self.affinity is not None:
            aff = np.asarray(self.affinity, dtype=float)
            if aff.shape != (len(c), len(gamma), len(gamma)):
                raise ParametrizationError(f"affinity must have shape (p, q, q), got {aff.shape}")
            object.__setattr__(self, "affinity", aff)

    @classmethod
    def uniform(cls, q: int, c, x) -> "ModelParams":
        return cls(np.full(q, 1.0 / q), c, x)

    @property
    def q(self) -> int:
        return len(self.gamma)

    @property
    def p(self) -> int:
        return len(self.c)

    @property
    def total_degree(self) -> float:
        return float(self.c.sum())

    @property
    def fractions(self) -> np.ndarray:
        return self.c / self.c.sum()

    def omegas(self, pattern: ModularPattern) -> np.ndarray:
        return np.array([pattern.omega(self.gamma, a) for a in range(self.p)])

    def delta_c(self, pattern: ModularPattern) -> np.ndarray:
        return np.asarray(x_to_delta_c(self.x, self.c, self.omegas(pattern)), dtype=float).reshape(self.p)

    def with_x(self, x) -> "ModelParams":
        return ModelParams(self.gamma, self.c, x)


def build_affinity(pattern: ModularPattern, params: ModelParams, n: Optional[int] = None) -> np.ndarray:
    """Per-label affinity matrices, shape ``(p, q, q)``.

    With ``n`` given, also checks that the implied nonedge weight
    ``n - sum_a c^a`` stays positive for every block pair.
    """
    if params.q != pattern.q:
        raise ParametrizationError(f"pattern has q={pattern.q}, parameters have q={params.q}")
    if params.affinity is not None:
        aff = params.affinity
    else:
        aff = np.empty((params.p, params.q, params.q))
        for a in range(params.p):
            Wa = pattern.label_matrix(a)
            omega = pattern.omega(params.gamma, a)
            dc = x_to_delta_c(params.x[a], params.c[a], omega)
            c_out = params.c[a] - dc * omega
            aff[a] = dc * Wa + c_out
        # round-off at x in {0, 1}
        aff[np.abs(aff) < 1e-12 * max(1.0, params.c.max())] = 0.0
    bad = np.argwhere(aff < 0)
    if len(bad):
        a, s, t = bad[0]
        raise ParametrizationError(
            f"negative affinity c[{a}][{s},{t}] = {aff[a, s, t]:.6g} (label {a}, modules {s}, {t})"
        )
    if n is not None:
        total = aff.sum(axis=0)
        if np.any(total >= n):
            s, t = np.argwhere(total >= n)[0]
            raise ParametrizationError(f"nonedge weight n - sum_a c[a][{s},{t}] is not positive for n={n}")
    return aff


def project_strength(pattern: ModularPattern, gamma, affinity, align: bool = False, reference=None) -> np.ndarray:
    """Strength ``x`` read off arbitrary affinity matrices; exact for restricted ones.

    A learned affinity matches ``W`` only up to a relabeling of the modules.
    With ``align`` the relabeling (shared by all labels) that puts the most
    weight away from ``x = Omega`` is used; for restricted affinities this
    is the identity or a symmetry of ``W``. Some patterns admit relabelings
    that map ``x`` to ``1 - x`` with the same score (chain4 does); ties go to
    the candidate nearest ``reference``, then to the identity.
    """
    g = np.asarray(gamma, dtype=float)
    aff = np.asarray(affinity, dtype=float)
    mats = [pattern.label_matrix(a) for a in range(len(aff))]

    def read(perm):
        gp = g[perm]
        xs = []
        for ca, Wa in zip(aff, mats):
            cp = ca[np.ix_(perm, perm)]
            xs.append((gp @ (cp * Wa) @ gp) / (gp @ cp @ gp))
        return np.array(xs)

    ident = list(range(pattern.q))
    x = read(ident)
    if align:
        if pattern.q > MAX_OVERLAP_Q:
            raise ValueError(f"relabeling search limited to q <= {MAX_OVERLAP_Q}")
        om = np.array([g @ Wa @ g for Wa in mats])
        ref = x if reference is None else np.asarray(reference, dtype=float)

        def key(xp):
            return (-round(float(np.sum((xp - om) ** 2)), 10), float(np.sum((xp - ref) ** 2)))

        best = key(x)
        for perm in itertools.permutations(ident):
            xp = read(list(perm))
            k = key(xp)
            if k < best:
                x, best = xp, k
    return np.clip(x, 0.0, 1.0)


def total_variation(affinity) -> np.ndarray:
    """Per-label sum of absolute deviations of the entries from their mean."""
    aff = np.asarray(affinity, dtype=float)
    mean = aff.mean(axis=(1, 2), keepdims=True)
    return np.abs(aff - mean).sum(axis=(1, 2))


# ---------------------------------------------------------------------------
# graphs


@dataclass(frozen=True, eq=False)
class LabeledGraph:
    """Simple undirected graph whose edges carry one of ``p`` labels.

    Edge ``m`` joins ``edges[m, 0] < edges[m, 1]``. Directed edge ids are
    ``2m`` for the forward orientation and ``2m + 1`` for the reverse, so the
    reverse of directed edge ``e`` is ``e ^ 1``.
    """

    n: int
    q: int
    p: int
    edges: np.ndarray
    labels: np.ndarray
    planted: Optional[np.ndarray] = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if len(edges) != len(labels):
            raise ValueError("one label per edge required")
        if len(edges):
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must satisfy i < j (no self-loops)")
            if edges.min() < 0 or edges.max() >= self.n:
                raise ValueError("edge endpoint out of range")
            keys = edges[:, 0] * self.n + edges[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate edges")
            if labels.min() < 0 or labels.max() >= self.p:
                raise ValueError("edge label out of range")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "labels", labels)
        if self.planted is not None:
            planted = np.asarray(self.planted, dtype=np.int64).ravel()
            if len(planted) != self.n or (self.n and (planted.min() < 0 or planted.max() >= self.q)):
                raise ValueError("planted assignment must have length n with entries in 0..q-1")
            object.__setattr__(self, "planted", planted)

        src = np.empty(2 * len(edges), dtype=np.int64)
        dst = np.empty_like(src)
        src[0::2], src[1::2] = edges[:, 0], edges[:, 1]
        dst[0::2], dst[1::2] = edges[:, 1], edges[:, 0]
        order = np.argsort(src, kind="stable")
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=self.n), out=indptr[1:])
        for name, arr in (("src", src), ("dst", dst), ("out_edges", order), ("indptr", indptr)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_directed(self) -> int:
        return 2 * len(self.edges)

    @cached_property
    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.p)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def empirical_degrees(self) -> np.ndarray:
        """Mean degree per label, ``2 L_a / n``."""
        return 2.0 * self.label_counts / self.n

    def adjacency(self, i: int) -> list:
        """``[(neighbor, label), ...]`` for vertex ``i``."""
        out = self.out_edges[self.indptr[i]:self.indptr[i + 1]]
        return [(int(self.dst[e]), int(self.labels[e >> 1])) for e in out]


def generate(pattern: ModularPattern, params: ModelParams, n: int, seed) -> LabeledGraph:
    """Sample a labeled SBM instance.

    Edge counts per block pair and label are Poisson with mean
    ``n_s n_t c[a][s,t] / n`` (``n_s (n_s - 1) / 2`` pairs on the diagonal);
    endpoints are uniform within the blocks and collisions are redrawn.
    """
    if n < pattern.q:
        raise ValueError(f"need n >= q, got n={n}, q={pattern.q}")
    aff = build_affinity(pattern, params, n=n)
    rng = np.random.default_rng(seed)
    planted = rng.choice(params.q, size=n, p=params.gamma)
    members = [np.flatnonzero(planted == s) for s in range(params.q)]
    sizes = np.array([len(m) for m in members])

    blocks = []  # (s, t, label, count)
    for a in range(params.p):
        for s in range(params.q):
            for t in range(s, params.q):
                pairs = sizes[s] * (sizes[s] - 1) / 2 if s == t else sizes[s] * sizes[t]
                mean = pairs * aff[a, s, t] / n
                count = int(rng.poisson(mean)) if mean > 0 else 0
                if count > pairs:
                    raise ParametrizationError(f"block ({s},{t}) cannot hold {count} edges; n too small")
                if count:
                    blocks.append((s, t, a, count))

    def draw(block_ids):
        u = np.empty(len(block_ids), dtype=np.int64)
        v = np.empty_like(u)
        for b in np.unique(block_ids):
            s, t, _, _ = blocks[b]
            sel = np.flatnonzero(block_ids == b)
            u[sel] = members[s][rng.integers(sizes[s], size=len(sel))]
            v[sel] = members[t][rng.integers(sizes[t], size=len(sel))]
        return u, v

    block_of = np.repeat(np.arange(len(blocks)), [b[3] for b in blocks]).astype(np.int64)
    label_of = np.array([blocks[b][2] for b in block_of], dtype=np.int64)
    u, v = draw(block_of)
    while True:
        lo, hi = np.minimum(u, v), np.maximum(u, v)
        keys = lo * n + hi
        _, first = np.unique(keys, return_index=True)
        ok = np.zeros(len(keys), dtype=bool)
        ok[first] = True
        ok &= lo != hi
        redo = np.flatnonzero(~ok)
        if not len(redo):
            break
        u[redo], v[redo] = draw(block_of[redo])
    order = np.argsort(keys, kind="stable")
    edges = np.stack([lo[order], hi[order]], axis=1)
    return LabeledGraph(n, params.q, params.p, edges, label_of[order], planted)


# ---------------------------------------------------------------------------
# scoring


def overlap(inferred, planted, q: int) -> float:
    """Fraction of agreeing vertices, maximized over relabelings of the modules."""
    inferred = np.asarray(inferred, dtype=np.int64)
    planted = np.asarray(planted, dtype=np.int64)
    if inferred.shape != planted.shape:
        raise ValueError("assignment vectors must have equal length")
    if q > MAX_OVERLAP_Q:
        raise ValueError(
            f"exact permutation search over {math.factorial(q)} relabelings is too large for q={q}; "
            f"use q <= {MAX_OVERLAP_Q} or a matching-based score"
        )
    if len(planted) == 0:
        return 1.0
    conf = np.zeros((q, q), dtype=np.int64)
    np.add.at(conf, (inferred, planted), 1)
    cols = np.arange(q)
    best = max(conf[list(perm), cols].sum() for perm in itertools.permutations(range(q)))
    return best / len(planted)


# ---------------------------------------------------------------------------
# serialization


def write_graph(path, graph: LabeledGraph, header: str = "") -> None:
    """Edge list: ``N q p``, then ``i j alpha`` per edge, then ``sigma i s``.

    Vertices and modules are 0-based; edge labels are written 1-based since
    label 0 denotes a nonedge.
    """
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.append(f"{graph.n} {graph.q} {graph.p}")
    lines.extend(f"{i} {j} {a + 1}" for (i, j), a in zip(graph.edges.tolist(), graph.labels.tolist()))
    if graph.planted is not None:
        lines.extend(f"sigma {i} {s}" for i, s in enumerate(graph.planted.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> LabeledGraph:
    header = None
    edges, labels, planted = [], [], {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if header is None:
            header = tuple(int(t) for t in parts)
            if len(header) != 3:
                raise ValueError(f"bad header line: {raw!r}")
        elif parts[0] == "sigma":
            planted[int(parts[1])] = int(parts[2])
        else:
            i, j, a = (int(t) for t in parts)
            edges.append((min(i, j), max(i, j)))
            labels.append(a - 1)
    if header is None:
        raise ValueError("empty graph file")
    n, q, p = header
    sigma = None
    if planted:
        if len(planted) != n:
            raise ValueError("planted assignment incomplete")
        sigma = np.array([planted[i] for i in range(n)])
    return LabeledGraph(n, q, p, np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(labels, dtype=np.int64), sigma)
