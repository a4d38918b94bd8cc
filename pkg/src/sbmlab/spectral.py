"""Label-weighted nonbacktracking operator, its analytic band and isolated eigenvalues."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp

from .graph_model import LabeledGraph, ModelParams, ModularPattern, build_affinity

log = logging.getLogger(__name__)

DENSE_LIMIT = 10_000
ISOLATED_MATCH = 0.10


class SpectralError(ValueError):
    pass


def edge_weights(estimates: ModelParams, pattern: ModularPattern) -> np.ndarray:
    """Per-label weight ``dc_hat / (q c_hat)``."""
    return estimates.delta_c(pattern) / (estimates.q * estimates.c)


class NonbacktrackingOperator:
    """Sparse ``B'`` on directed edges.

    ``(B' v)[i->j] = sum_{k in di, k != j} w[label(ik)] v[k->i]``; directed
    edge ids follow :class:`LabeledGraph` (``2m`` is ``i->j`` for the
    stored pair, ``2m+1`` the reverse).
    """

    def __init__(self, graph: LabeledGraph, weights):
        w = np.asarray(weights, dtype=float)
        if w.shape != (graph.p,):
            raise SpectralError(f"need one weight per label, got shape {w.shape}")
        self.graph = graph
        self.weights = w
        self.matrix = self._build(graph, w)

    @classmethod
    def from_estimates(cls, graph, estimates: ModelParams, pattern: ModularPattern):
        if estimates.p != graph.p:
            raise SpectralError("estimates and graph disagree on the number of labels")
        return cls(graph, edge_weights(estimates, pattern))

    @staticmethod
    def _build(graph: LabeledGraph, w: np.ndarray) -> sp.csr_matrix:
        deg = np.diff(graph.indptr)
        owner = np.repeat(np.arange(graph.n), deg)  # vertex of each out_edges slot
        reps = deg[owner]
        rows = np.repeat(graph.out_edges, reps)
        # for slot u, enumerate every slot of the same vertex
        first = np.repeat(graph.indptr[owner], reps)
        offset = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
        cols = graph.out_edges[first + offset] ^ 1
        keep = cols != (rows ^ 1)
        rows, cols = rows[keep], cols[keep]
        vals = w[graph.labels[cols >> 1]]
        size = graph.n_directed
        return sp.csr_matrix((vals, (rows, cols)), shape=(size, size))

    @property
    def shape(self):
        return self.matrix.shape

    def matvec(self, v):
        return self.matrix @ v

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


# ---------------------------------------------------------------------------
# closed forms


def band_radius_forms(estimates: ModelParams, pattern: ModularPattern):
    """Band edge from the affinity gaps and from the strengths; returns both."""
    c = estimates.total_degree
    P = estimates.fractions
    q = estimates.q
    dc = estimates.delta_c(pattern)
    om = estimates.omegas(pattern)
    from_dc = np.sqrt(np.sum(dc ** 2 / P)) / (q * np.sqrt(c))
    from_x = np.sqrt(c) / q * np.sqrt(np.sum(P * ((estimates.x - om) / (om * (1.0 - om))) ** 2))
    return float(from_dc), float(from_x)


def band_radius_formula(estimates: ModelParams, pattern: ModularPattern) -> float:
    a, b = band_radius_forms(estimates, pattern)
    if not np.isclose(a, b, rtol=1e-12, atol=1e-12):
        raise RuntimeError(f"band radius forms disagree: {a!r} vs {b!r}")
    return a


def _check_uniform(params: ModelParams, pattern: ModularPattern, who: str):
    if not np.allclose(params.gamma, 1.0 / params.q, rtol=0, atol=1e-12):
        raise SpectralError(f"{who}: isolated-eigenvalue formula needs equal module sizes, got {params.gamma}")
    if not pattern.equal_row_sums:
        raise SpectralError("isolated-eigenvalue formula needs equal row sums of W")


def mean_field_matrix(planted: ModelParams, estimates: ModelParams, pattern: ModularPattern) -> np.ndarray:
    """``J[s, t] = (1/q) sum_a c^a[s, t] w_a`` for equal module sizes."""
    _check_uniform(planted, pattern, "planted")
    _check_uniform(estimates, pattern, "estimates")
    aff = build_affinity(pattern, planted)
    w = edge_weights(estimates, pattern)
    return np.einsum("ast,a->st", aff, w) / planted.q


@dataclass(frozen=True)
class IsolatedEigenvalues:
    iso: float
    plus: float
    iso_from_x: float


def isolated_eigenvalue_formula(planted: ModelParams, estimates: ModelParams, pattern: ModularPattern) -> IsolatedEigenvalues:
    """Structure-correlated eigenvalue ``lambda2(W) * dJ`` and the unit-vector one ``a dJ + q J_out``."""
    _check_uniform(planted, pattern, "planted")
    _check_uniform(estimates, pattern, "estimates")
    if not pattern.has_common_pattern:
        raise SpectralError("isolated-eigenvalue formula needs one pattern shared by all labels")
    if planted.p != estimates.p:
        raise SpectralError("planted and estimated parameters disagree on the number of labels")
    q = planted.q
    om = planted.omegas(pattern)
    dc = planted.delta_c(pattern)
    dc_hat = estimates.delta_c(pattern)
    w = dc_hat / (q * estimates.c)
    dJ = float(np.sum(dc * w) / q)
    c_out = planted.c - dc * om
    J_out = float(np.sum(c_out * w) / q)
    lam2 = pattern.lambda2
    iso = lam2 * dJ
    scale = (q * om * (1.0 - om)) ** 2
    iso_x = lam2 * float(np.sum(planted.c * (planted.x - om) * (estimates.x - om) / scale))
    if not np.isclose(iso, iso_x, rtol=1e-12, atol=1e-12):
        raise RuntimeError(f"isolated eigenvalue forms disagree: {iso!r} vs {iso_x!r}")
    return IsolatedEigenvalues(iso, pattern.row_sum * dJ + q * J_out, iso_x)


def planted_strengths(graph: LabeledGraph, pattern: ModularPattern) -> np.ndarray:
    """Fraction of each label's edges that join pattern-linked module pairs."""
    if graph.planted is None:
        raise SpectralError("graph carries no planted assignment")
    s = graph.planted
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    mats = pattern.label_matrices(graph.p)
    inside = mats[graph.labels, s[i], s[j]]
    counts = graph.label_counts
    with np.errstate(invalid="ignore"):
        return np.bincount(graph.labels, weights=inside, minlength=graph.p) / counts


# ---------------------------------------------------------------------------
# empirical spectra


@dataclass
class SpectrumSummary:
    band_radius_formula: float
    band_radius_empirical: float
    isolated_eigenvalues: list
    leading_real: Optional[float]
    eigenvalues: np.ndarray = field(repr=False)
    predictions: list = field(default_factory=list)
    iso_formula: Optional[float] = None
    mode: str = "dense"
    converged: bool = True
    residual: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("eigenvalues")
        d["isolated_eigenvalues"] = [[float(z.real), float(z.imag)] for z in self.isolated_eigenvalues]
        d["predictions"] = [[float(np.real(z)), float(np.imag(z))] for z in self.predictions]
        d["n_eigenvalues"] = int(len(self.eigenvalues))
        return d

    def to_json(self, path, header: Optional[dict] = None) -> None:
        d = self.to_dict()
        if header:
            d = {"header": header, **d}
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2)


def write_spectrum_csv(path, eigenvalues, header: str = "") -> None:
    lines = ["# " + h for h in header.splitlines()] if header else []
    lines.append("re,im")
    lines += [f"{z.real!r},{z.imag!r}" for z in np.asarray(eigenvalues, dtype=complex)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def split_isolated(eigs, predictions, match: float = ISOLATED_MATCH, imag_tol: float = 1e-8):
    """Remove the eigenvalue nearest each nonzero prediction when it lies within ``match``.

    Returns ``(band_radius, isolated)``. With no usable prediction the band
    radius falls back to the largest magnitude among non-real eigenvalues.
    """
    eigs = np.asarray(eigs, dtype=complex)
    mags = np.abs(eigs)
    scale = max(1.0, float(mags.max(initial=0.0)))
    is_real = np.abs(eigs.imag) <= imag_tol * scale
    removed = np.zeros(len(eigs), dtype=bool)
    for mu in predictions:
        mu = complex(mu)
        if abs(mu) == 0.0:
            continue
        dist = np.abs(eigs - mu)
        dist[removed] = np.inf
        k = int(np.argmin(dist)) if len(eigs) else -1
        if k >= 0 and dist[k] <= match * abs(mu):
            removed[k] = True
    if not removed.any():
        pool = mags[~is_real]
        band = float(pool.max()) if len(pool) else float(mags.max(initial=0.0))
        return band, [complex(z) for z in eigs[is_real & (mags > band)]]
    band = float(mags[~removed].max(initial=0.0))
    iso = [complex(z) for z in eigs[removed] if abs(z) > band]
    return band, iso


def _iterative_eigs(op: NonbacktrackingOperator, k: int, tol: float, maxiter: Optional[int]):
    n = op.shape[0]
    k = min(k, n - 2)
    try:
        vals, vecs = spla.eigs(op.matrix, k=k, which="LM", tol=tol, maxiter=maxiter)
        converged = True
    except spla.ArpackNoConvergence as exc:
        vals, vecs = exc.eigenvalues, exc.eigenvectors
        converged = False
        log.warning("Arnoldi iteration returned %d of %d eigenvalues", len(vals), k)
    res = 0.0
    if len(vals):
        r = op.matrix @ vecs - vecs * vals[None, :]
        res = float(np.max(np.linalg.norm(r, axis=0)))
    return vals, converged, res


def empirical_spectrum(
    graph: LabeledGraph,
    estimates: ModelParams,
    pattern: ModularPattern,
    mode: str = "dense",
    *,
    planted: Optional[ModelParams] = None,
    k: int = 50,
    tol: float = 0.0,
    maxiter: Optional[int] = None,
) -> SpectrumSummary:
    """Eigenvalues of ``B'`` with band/isolated separation.

    Predictions for the isolated eigenvalues are the eigenvalues of the
    mean-field matrix built from ``planted`` (or, if omitted, from the
    strengths measured on the graph's planted assignment with the
    estimated degrees).
    """
    op = NonbacktrackingOperator.from_estimates(graph, estimates, pattern)
    size = op.shape[0]
    if mode == "dense":
        if size > DENSE_LIMIT:
            raise SpectralError(f"dense mode limited to {DENSE_LIMIT} directed edges, graph has {size}")
        eigs = scipy.linalg.eigvals(op.to_dense()) if size else np.zeros(0, dtype=complex)
        converged, res = True, 0.0
    elif mode == "iterative":
        eigs, converged, res = _iterative_eigs(op, k, tol, maxiter)
    else:
        raise SpectralError(f"unknown mode {mode!r}")

    preds, iso_f = [], None
    if planted is None and graph.planted is not None:
        x_emp = np.clip(planted_strengths(graph, pattern), 0.0, 1.0)
        if np.all(np.isfinite(x_emp)):
            planted = ModelParams(estimates.gamma, estimates.c, x_emp)
    if planted is not None:
        try:
            J = mean_field_matrix(planted, estimates, pattern)
            preds = sorted(np.linalg.eigvals(J).tolist(), key=abs, reverse=True)
            if pattern.has_common_pattern:
                iso_f = isolated_eigenvalue_formula(planted, estimates, pattern).iso
        except (SpectralError, ValueError) as exc:
            log.info("no isolated-eigenvalue predictions: %s", exc)

    band, iso = split_isolated(eigs, preds)
    mags = np.abs(eigs)
    real = eigs[np.abs(eigs.imag) <= 1e-8 * max(1.0, float(mags.max(initial=0.0)))]
    leading = float(real[np.argmax(np.abs(real))].real) if len(real) else None
    return SpectrumSummary(
        band_radius_formula=band_radius_formula(estimates, pattern),
        band_radius_empirical=band,
        isolated_eigenvalues=iso,
        leading_real=leading,
        eigenvalues=np.asarray(eigs),
        predictions=preds,
        iso_formula=iso_f,
        mode=mode,
        converged=converged,
        residual=res,
    )


# ---------------------------------------------------------------------------
# stochastic trace bound


@dataclass(frozen=True)
class TraceBound:
    value: float
    stderr: float
    probes: int
    d: int


def band_radius_trace_bound(graph: LabeledGraph, estimates: ModelParams, pattern: ModularPattern, d: int = 10,
                            probes: int = 32, seed=None) -> TraceBound:
    """``[(1/2L) tr(B'^d (B'^d)^T)]^(1/2d)`` from Rademacher probes.

    Each probe is pushed through ``d`` applications of ``B'`` with the
    running norm kept in log form, so large ``d`` cannot overflow.
    """
    if d < 2:
        raise ValueError("path length d must be at least 2")
    if probes < 2:
        raise ValueError("need at least two probes for a standard error")
    op = NonbacktrackingOperator.from_estimates(graph, estimates, pattern)
    size = op.shape[0]
    if size == 0:
        return TraceBound(0.0, 0.0, probes, d)
    rng = np.random.default_rng(seed)
    Z = rng.choice([-1.0, 1.0], size=(size, probes))
    logn = np.zeros(probes)
    for _ in range(d):
        Z = op.matrix @ Z
        nrm = np.linalg.norm(Z, axis=0)
        with np.errstate(divide="ignore"):
            logn += np.log(nrm)
        Z = Z / np.where(nrm > 0, nrm, 1.0)[None, :]
    # log ||B'^d z||^2 per probe
    ls = 2.0 * logn
    if np.all(np.isneginf(ls)):
        return TraceBound(0.0, 0.0, probes, d)
    log_mean = logsumexp(ls) - np.log(probes) - np.log(size)
    value = float(np.exp(log_mean / (2 * d)))
    # delta method on the mean of ||B'^d z||^2 / 2L
    rel = np.exp(ls - np.log(size) - log_mean)
    se_rel = float(np.std(rel, ddof=1) / np.sqrt(probes))
    return TraceBound(value, value * se_rel / (2 * d), probes, d)
