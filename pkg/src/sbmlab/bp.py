"""Belief-propagation E-step for the labeled SBM and a brute-force posterior oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .graph_model import LabeledGraph, ModelParams, ModularPattern, build_affinity

MAX_BRUTEFORCE_N = 14


class BPError(RuntimeError):
    pass


@dataclass
class MessageSet:
    """Cavity messages per directed edge, node marginals, and the external field.

    ``messages[e]`` is the message along directed edge ``e`` (see
    :class:`LabeledGraph` for the id convention). ``field[a, s]`` is the
    label-``a`` contribution ``sum_l sum_r psi^l_r c^a[r, s] / N``.
    """

    messages: np.ndarray
    marginals: np.ndarray
    field: Optional[np.ndarray] = None

    @property
    def q(self) -> int:
        return self.messages.shape[1]

    def copy(self) -> "MessageSet":
        return MessageSet(
            self.messages.copy(),
            self.marginals.copy(),
            None if self.field is None else self.field.copy(),
        )


def init_messages(graph: LabeledGraph, q: int, seed=None, bias=None, weight: float = 1.0) -> MessageSet:
    """Random initial messages, uniform on the simplex.

    With ``bias`` (an assignment vector) every message leaving vertex ``i``
    becomes ``(1 - weight) * dirichlet + weight * onehot(bias[i])``; the
    Dirichlet draws are made either way so ``weight=0`` reproduces the
    unbiased messages exactly.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    msgs = rng.dirichlet(np.ones(q), size=graph.n_directed)
    marg = rng.dirichlet(np.ones(q), size=graph.n)
    if bias is not None:
        if not 0.0 <= weight <= 1.0:
            raise ValueError("bias weight must lie in [0, 1]")
        bias = np.asarray(bias, dtype=np.int64)
        onehot = np.eye(q)[bias]
        msgs = (1.0 - weight) * msgs + weight * onehot[graph.src]
        marg = (1.0 - weight) * marg + weight * onehot
    return MessageSet(msgs, marg)


def external_field(marginals: np.ndarray, affinity: np.ndarray) -> np.ndarray:
    n = marginals.shape[0]
    totals = marginals.sum(axis=0)
    return np.einsum("r,ars->as", totals, affinity) / n


def bp_sweep(
    graph: LabeledGraph,
    pattern: ModularPattern,
    estimates: ModelParams,
    msgs: MessageSet,
    rng=None,
    *,
    damping: float = 0.0,
    use_field: bool = True,
):
    """Update every message once, in place, in a fresh random vertex order.

    Returns ``(msgs, max_change)`` where ``max_change`` is the largest L1
    change of a single message. ``use_field=False`` drops the nonedge
    (external field) term, which makes BP exact on trees for the
    edges-only likelihood.
    """
    if msgs.q != pattern.q or estimates.p != graph.p:
        raise ValueError("estimates inconsistent with graph labels or module count")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    aff = build_affinity(pattern, estimates)
    field = external_field(msgs.marginals, aff)
    msgs.field = field
    with np.errstate(divide="ignore"):
        log_prior = np.log(estimates.gamma)
    if use_field:
        log_prior = log_prior - field.sum(axis=0)
    prior = np.exp(log_prior - np.max(log_prior))
    order = rng.permutation(graph.n)
    change, bad = _kernels.bp_sweep_kernel(
        order, graph.indptr, graph.out_edges, graph.labels, aff, prior,
        msgs.messages, msgs.marginals, float(damping),
    )
    if bad >= 0:
        i, j = int(graph.src[bad]), int(graph.dst[bad])
        raise BPError(f"message normalizer vanished on directed edge {i}->{j} (id {bad})")
    return msgs, float(change)


def run_bp(graph, pattern, estimates, msgs, *, tol=1e-12, max_sweeps=1000, seed=None, use_field=True):
    """Iterate sweeps at fixed parameters; returns ``(msgs, sweeps, converged)``."""
    rng = np.random.default_rng(seed)
    for sweep in range(1, max_sweeps + 1):
        msgs, change = bp_sweep(graph, pattern, estimates, msgs, rng, use_field=use_field)
        if change < tol:
            return msgs, sweep, True
    return msgs, max_sweeps, False


def marginals_decode(msgs) -> np.ndarray:
    """Most likely module per vertex; ties go to the lowest module index."""
    marg = msgs.marginals if isinstance(msgs, MessageSet) else np.asarray(msgs)
    return np.argmax(marg, axis=1)


def exact_marginals_bruteforce(
    graph: LabeledGraph,
    pattern: ModularPattern,
    params: ModelParams,
    include_nonedges: bool = True,
    chunk: int = 1 << 16,
) -> np.ndarray:
    """Posterior marginals by summing the labeled-SBM likelihood over all ``q^N`` assignments."""
    n, q = graph.n, pattern.q
    if n > MAX_BRUTEFORCE_N:
        raise ValueError(f"brute force over q^N assignments is limited to N <= {MAX_BRUTEFORCE_N}, got N={n}")
    aff = build_affinity(pattern, params)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_gamma = np.log(params.gamma)
        log_aff = np.log(aff / n)
        nonedge = 1.0 - aff.sum(axis=0) / n
        if include_nonedges and np.any(nonedge <= 0):
            raise ValueError("nonedge probability not positive; increase N or lower degrees")
        log_nonedge = np.log(nonedge)

    i_idx, j_idx = graph.edges[:, 0], graph.edges[:, 1]
    if include_nonedges:
        present = set(map(tuple, graph.edges.tolist()))
        absent = np.array([pr for pr in itertools.combinations(range(n), 2) if pr not in present], dtype=np.int64)
        absent = absent.reshape(-1, 2)

    total = q ** n
    log_w = np.empty(total)
    configs = np.empty((total, n), dtype=np.int8)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        # digit k of idx in base q is the module of vertex k
        sig = (idx[:, None] // q ** np.arange(n)[None, :]) % q
        lw = log_gamma[sig].sum(axis=1)
        if len(i_idx):
            lw += log_aff[graph.labels[None, :], sig[:, i_idx], sig[:, j_idx]].sum(axis=1)
        if include_nonedges and len(absent):
            lw += log_nonedge[sig[:, absent[:, 0]], sig[:, absent[:, 1]]].sum(axis=1)
        log_w[idx] = lw
        configs[idx] = sig
    m = np.max(log_w)
    if not np.isfinite(m):
        raise ValueError("every assignment has zero likelihood")
    w = np.exp(log_w - m)
    w /= w.sum()
    return np.stack([np.bincount(configs[:, i], weights=w, minlength=q) for i in range(n)])
