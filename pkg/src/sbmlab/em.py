"""M-step updates and the EM driver (BP E-step, point-estimate M-step)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .bp import MessageSet, bp_sweep, init_messages, marginals_decode
from .graph_model import (
    LabeledGraph,
    ModelParams,
    ModularPattern,
    build_affinity,
    overlap,
    project_strength,
    total_variation,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmConfig:
    max_steps: int = 2000
    tol: float = 1e-6
    sweeps_per_mstep: int = 1
    learning_rate: float = 1.0
    restrict_affinity: bool = True
    damping: float = 0.0
    clamp_eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.sweeps_per_mstep < 1:
            raise ValueError("sweeps_per_mstep must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class XiStats:
    """Edge averages of the normalized deviation, per label; NaN where a label has no edges."""

    mean: np.ndarray
    second: np.ndarray
    count: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return self.second - self.mean ** 2

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, 0.0))


def _label_omegas(pattern, gamma_hat, p):
    g = np.asarray(gamma_hat, dtype=float)
    return np.array([g @ pattern.label_matrix(a) @ g for a in range(p)])


def edge_xi(graph: LabeledGraph, pattern: ModularPattern, msgs: MessageSet, gamma_hat) -> np.ndarray:
    """Per-edge ``xi = (X - Omega_a) / Omega_a`` with ``X = psi^{i->j} W^a psi^{j->i}``."""
    omegas = _label_omegas(pattern, gamma_hat, graph.p)
    if np.any((omegas <= 0) | (omegas >= 1)):
        raise ValueError(f"estimated pattern density must lie in (0, 1), got {omegas}")
    X = _kernels.edge_overlap_kernel(msgs.messages, pattern.label_matrices(graph.p), graph.labels)
    om = omegas[graph.labels]
    return (X - om) / om


def xi_statistics(graph, pattern, msgs, gamma_hat, xi=None) -> XiStats:
    if xi is None:
        xi = edge_xi(graph, pattern, msgs, gamma_hat)
    count = graph.label_counts
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.bincount(graph.labels, weights=xi, minlength=graph.p) / count
        second = np.bincount(graph.labels, weights=xi * xi, minlength=graph.p) / count
    return XiStats(mean, second, count)


def x_update_factor(xi: np.ndarray, x_hat, omega_hat) -> np.ndarray:
    """Per-edge multiplier ``(1 + xi) / (1 + k xi)``, ``k = (x_hat - Omega) / (1 - Omega)``."""
    k = (x_hat - omega_hat) / (1.0 - omega_hat)
    den = 1.0 + k * xi
    bad = den <= 1e-12
    if np.any(bad):
        log.warning("clamped %d degenerate x-update terms", int(bad.sum()))
        den = np.where(bad, 1e-12, den)
    return (1.0 + xi) / den


def m_step_x(graph, pattern, msgs, estimates: ModelParams, learning_rate: float = 1.0, xi=None) -> np.ndarray:
    """Restricted-affinity update of the per-label strengths ``x_hat``."""
    if xi is None:
        xi = edge_xi(graph, pattern, msgs, estimates.gamma)
    omegas = _label_omegas(pattern, estimates.gamma, graph.p)
    x = estimates.x
    factor = x_update_factor(xi, x[graph.labels], omegas[graph.labels])
    count = graph.label_counts
    mean = np.bincount(graph.labels, weights=factor, minlength=graph.p) / np.maximum(count, 1)
    # labels without edges keep their estimate
    return np.where(count > 0, x * (1.0 + learning_rate * (mean - 1.0)), x)


def m_step_gamma(marginals) -> np.ndarray:
    g = np.asarray(marginals, dtype=float).mean(axis=0)
    return g / g.sum()


def m_step_full_affinity(graph: LabeledGraph, msgs: MessageSet, gamma_hat, affinity) -> np.ndarray:
    """Point estimates of unrestricted ``(p, q, q)`` affinities from two-point edge marginals."""
    g = np.asarray(gamma_hat, dtype=float)
    if np.any(g <= 0):
        raise ValueError(f"degenerate module: gamma_hat = {g}")
    M = _kernels.two_point_kernel(msgs.messages, np.asarray(affinity, dtype=float), graph.labels, graph.p)
    return M / (graph.n * np.outer(g, g))[None, :, :]


@dataclass
class EmTrajectory:
    """Per-step record; row 0 is the initial state, row t follows the t-th M-step."""

    x_hat: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    omega_hat: list = field(default_factory=list)
    delta_tv: list = field(default_factory=list)
    xi_mean: list = field(default_factory=list)
    xi_second: list = field(default_factory=list)
    max_change: list = field(default_factory=list)

    def append(self, x_hat, gamma, omega_hat, delta_tv, xi: XiStats, max_change):
        self.x_hat.append(np.array(x_hat, dtype=float))
        self.gamma.append(np.array(gamma, dtype=float))
        self.omega_hat.append(np.array(omega_hat, dtype=float))
        self.delta_tv.append(float(delta_tv))
        self.xi_mean.append(xi.mean.copy())
        self.xi_second.append(xi.second.copy())
        self.max_change.append(float(max_change))

    def __len__(self):
        return len(self.x_hat)

    def arrays(self) -> dict:
        return {
            "x_hat": np.array(self.x_hat),
            "gamma": np.array(self.gamma),
            "omega_hat": np.array(self.omega_hat),
            "delta_tv": np.array(self.delta_tv),
            "xi_mean": np.array(self.xi_mean),
            "xi_second": np.array(self.xi_second),
            "max_change": np.array(self.max_change),
        }

    def to_csv(self, path, header: str = "") -> None:
        arr = self.arrays()
        p, q = arr["x_hat"].shape[1], arr["gamma"].shape[1]
        cols = (
            ["step"] + [f"x{a + 1}_hat" for a in range(p)] + [f"gamma_{s + 1}" for s in range(q)]
            + ["delta_tv"] + [f"xi_mean_{a + 1}" for a in range(p)] + [f"xi_var_{a + 1}" for a in range(p)]
            + [f"xi_sq_{a + 1}" for a in range(p)] + ["max_change"]
        )
        var = arr["xi_second"] - arr["xi_mean"] ** 2
        lines = ["# " + h for h in header.splitlines()] if header else []
        lines.append(",".join(cols))
        for t in range(len(self)):
            row = [str(t)]
            row += [repr(float(v)) for v in arr["x_hat"][t]]
            row += [repr(float(v)) for v in arr["gamma"][t]]
            row += [repr(float(arr["delta_tv"][t]))]
            row += [repr(float(v)) for v in arr["xi_mean"][t]]
            row += [repr(float(v)) for v in var[t]]
            row += [repr(float(v)) for v in arr["xi_second"][t]]
            row += [repr(float(arr["max_change"][t]))]
            lines.append(",".join(row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class EmResult:
    trajectory: EmTrajectory
    estimates: ModelParams
    assignment: np.ndarray
    messages: MessageSet
    converged: bool
    steps: int
    overlap: Optional[float] = None

    @property
    def status(self) -> str:
        return "converged" if self.converged else "unconverged"


def run_em(
    graph: LabeledGraph,
    pattern: ModularPattern,
    init: ModelParams,
    config: EmConfig = EmConfig(),
    seed=None,
    *,
    messages: Optional[MessageSet] = None,
    callback: Optional[Callable] = None,
) -> EmResult:
    """Alternate BP sweeps with M-steps until the message change drops below ``config.tol``.

    ``callback(step, estimates, msgs)`` runs after each M-step (and once for
    step 0) and may be used to snapshot state.
    """
    rng = np.random.default_rng(seed)
    msgs = messages if messages is not None else init_messages(graph, pattern.q, rng)
    eps = config.clamp_eps
    est = init.with_x(np.clip(init.x, eps, 1.0 - eps)) if config.restrict_affinity else init
    if not config.restrict_affinity and est.affinity is None:
        aff0 = build_affinity(pattern, est)
        est = ModelParams(est.gamma, est.c, est.x, affinity=aff0)

    traj = EmTrajectory()

    def record(stats, change):
        tv = total_variation(build_affinity(pattern, est)).sum()
        traj.append(est.x, est.gamma, _label_omegas(pattern, est.gamma, graph.p), tv, stats, change)

    record(xi_statistics(graph, pattern, msgs, est.gamma), np.nan)
    if callback is not None:
        callback(0, est, msgs)

    converged = False
    step = 0
    for step in range(1, config.max_steps + 1):
        for _ in range(config.sweeps_per_mstep):
            msgs, change = bp_sweep(graph, pattern, est, msgs, rng, damping=config.damping)
        xi = edge_xi(graph, pattern, msgs, est.gamma)
        stats = xi_statistics(graph, pattern, msgs, est.gamma, xi=xi)
        gamma_new = m_step_gamma(msgs.marginals)
        if config.restrict_affinity:
            x_new = m_step_x(graph, pattern, msgs, est, config.learning_rate, xi=xi)
            est = ModelParams(gamma_new, est.c, np.clip(x_new, eps, 1.0 - eps))
        else:
            aff_old = build_affinity(pattern, est)
            # normalize by the new module sizes so that gamma' c' gamma' = 2L/N
            aff_new = m_step_full_affinity(graph, msgs, gamma_new, aff_old)
            aff_new = aff_old + config.learning_rate * (aff_new - aff_old)
            # an exact zero would turn into a hard constraint in the next sweep
            aff_new = np.maximum(aff_new, eps)
            c_new = np.einsum("s,ast,t->a", gamma_new, aff_new, gamma_new)
            x_new = project_strength(pattern, gamma_new, aff_new, align=True, reference=est.x)
            est = ModelParams(gamma_new, c_new, x_new, affinity=aff_new)
        # xi statistics describe the messages this M-step consumed
        record(stats, change)
        if callback is not None:
            callback(step, est, msgs)
        if change < config.tol:
            converged = True
            break

    assignment = marginals_decode(msgs)
    score = overlap(assignment, graph.planted, pattern.q) if graph.planted is not None else None
    return EmResult(traj, est, assignment, msgs, converged, step, score)
