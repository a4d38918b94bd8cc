"""Transient map, stall point and the analytic detectability boundaries."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .graph_model import ModelParams, ModularPattern, identity_pattern
from .spectral import SpectralError, band_radius_formula, isolated_eigenvalue_formula

log = logging.getLogger(__name__)

CLASSES = ("detectable", "undetectable_stall", "dead_init", "escape_to_detectable")
MATCHED_LOW, MATCHED_HIGH = 0.1, 0.9


def transient_map(x_hat, omega, xi_var):
    """Second-order x-update ``x (1 + k (k - 1) <xi^2>)``, ``k = (x - Omega) / (1 - Omega)``."""
    x = np.asarray(x_hat, dtype=float)
    om = np.asarray(omega, dtype=float)
    k = (x - om) / (1.0 - om)
    return x * (1.0 + k * (k - 1.0) * np.asarray(xi_var, dtype=float))


def _label_omegas(pattern: ModularPattern, p: int) -> np.ndarray:
    g = np.full(pattern.q, 1.0 / pattern.q)
    return np.array([pattern.omega(g, a) for a in range(p)])


def _params(pattern, c, x) -> ModelParams:
    return ModelParams.uniform(pattern.q, c, x)


def band_condition(x_hat, pattern: ModularPattern, c) -> float:
    """``|lambda2(W) lambda_b(x_hat)|`` for equal module sizes."""
    return pattern.lambda2 * band_radius_formula(_params(pattern, c, x_hat), pattern)


def iso_condition(x, x_hat, pattern: ModularPattern, c) -> float:
    """``|lambda2(W) lambda_iso(x, x_hat)|``."""
    planted = _params(pattern, c, x)
    return abs(pattern.lambda2 * isolated_eigenvalue_formula(planted, planted.with_x(x_hat), pattern).iso)


# ---------------------------------------------------------------------------
# continuous transient flow dx/dt = x (x - Om)(x - 1) / (1 - Om)^2


def _flow_potential(x, om):
    # antiderivative of 1 / (x (x - om)(x - 1)); increases by t / (1 - om)^2 along the flow
    return math.log(abs(x)) / om - math.log(abs(x - om)) / (om * (1.0 - om)) + math.log(abs(1.0 - x)) / (1.0 - om)


def _flow_position(x0, om, t):
    """Position at time ``t`` of the flow started at ``x0``; fixed points stay put."""
    if t == 0.0 or x0 in (0.0, 1.0) or x0 == om:
        return x0
    sign = 1.0 if x0 > om else -1.0
    target = _flow_potential(x0, om) + t / (1.0 - om) ** 2
    s_hi = math.log(abs(x0 - om))
    if om + sign * math.exp(s_hi) in (0.0, 1.0):
        # x0 within rounding of an endpoint: numerically a fixed point
        return x0

    def h(s):
        x = om + sign * math.exp(s)
        if x == om:
            return math.inf  # the potential diverges at om
        return _flow_potential(x, om) - target

    s_lo = s_hi - 1.0
    while h(s_lo) < 0.0:
        s_lo -= 2.0 * (s_hi - s_lo)
        if s_lo < -700.0:
            return om
    if h(s_hi) >= 0.0:
        return x0
    s = brentq(h, s_lo, s_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return om + sign * math.exp(s)


def flow_path(x_init, omegas, t):
    return np.array([_flow_position(float(x0), float(om), float(t)) for x0, om in zip(x_init, omegas)])


def stall_point(x_init, pattern: ModularPattern, c, method: str = "flow", xi_var: float = 1e-3,
                tol: float = 1e-10) -> np.ndarray:
    """Where the universal transient from ``x_init`` first meets ``|lambda2 lambda_b| = 1``.

    ``method="flow"`` integrates the continuous limit of the transient map
    in closed form (the shared ``<xi^2>`` only sets the clock);
    ``method="map"`` iterates the discrete map with the given ``xi_var``
    and bisects the fractional last step.
    """
    x0 = np.asarray(x_init, dtype=float)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    om = _label_omegas(pattern, len(x0))

    def g(x):
        return band_condition(x, pattern, c) - 1.0

    if g(x0) <= 0.0:
        return x0.copy()
    moving = ~((x0 == 0.0) | (x0 == 1.0) | (x0 == om))
    if not moving.any():
        log.warning("no label can move from %s; stall point undefined", x0)
        return x0.copy()
    # endpoint of the flow; labels pinned by rounding stay put
    limit = flow_path(x0, om, 1e300)
    if g(limit) >= 0.0:
        log.warning("band condition stays above 1 along the whole path from %s", x0)
        return x0.copy()

    if method == "flow":
        t_hi = 1.0
        while g(flow_path(x0, om, t_hi)) > 0.0:
            t_hi *= 2.0
            if t_hi > 1e300:
                raise RuntimeError(f"flow from {x0} does not reach the band locus")
        t_star = brentq(lambda t: g(flow_path(x0, om, t)), 0.0, t_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
        x_star = flow_path(x0, om, t_star)
    elif method == "map":
        if not 0.0 < xi_var < 1.0:
            raise ValueError("xi_var must lie in (0, 1)")
        x = x0.copy()
        for _ in range(10_000_000):
            nxt = transient_map(x, om, xi_var)
            if g(nxt) <= 0.0:
                break
            x = nxt
        else:
            raise RuntimeError("transient map did not reach the band locus")
        frac = brentq(lambda f: g(transient_map(x, om, f * xi_var)), 0.0, 1.0, xtol=1e-15)
        x_star = transient_map(x, om, frac * xi_var)
    else:
        raise ValueError(f"unknown method {method!r}")
    if abs(g(x_star)) > tol:
        log.warning("stall point condition residual %.3g exceeds %.1g", g(x_star), tol)
    return x_star


def matched_init(x, pattern: ModularPattern, low: float = MATCHED_LOW, high: float = MATCHED_HIGH) -> np.ndarray:
    """Initial strengths on the same side of ``Omega`` as ``x``, per label (ties go high)."""
    x = np.asarray(x, dtype=float)
    om = _label_omegas(pattern, len(x))
    if np.any(low >= om) or np.any(high <= om):
        raise ValueError(f"matched init values ({low}, {high}) must straddle Omega={om}")
    return np.where(x >= om, high, low)


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class PhaseRegion:
    classification: str
    stall_point: np.ndarray
    band_margin: float  # |lambda2 lambda_b(init)| - 1
    iso_margin: float  # |lambda2 lambda_iso(x, x_hat*)| - 1

    @property
    def detectable(self) -> bool:
        return self.classification in ("detectable", "escape_to_detectable")


def classify(planted_x, x_init, pattern: ModularPattern, c) -> PhaseRegion:
    x = np.asarray(planted_x, dtype=float)
    x0 = np.asarray(x_init, dtype=float)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if not pattern.equal_row_sums:
        raise SpectralError("classification needs equal row sums of W")
    band = band_condition(x0, pattern, c)
    if band > 1.0:
        xs = stall_point(x0, pattern, c)
        iso = iso_condition(x, xs, pattern, c)
        label = "detectable" if iso > 1.0 else "undetectable_stall"
    else:
        xs = x0.copy()
        iso = iso_condition(x, x0, pattern, c)
        label = "escape_to_detectable" if iso > 1.0 else "dead_init"
    return PhaseRegion(label, xs, band - 1.0, iso - 1.0)


# ---------------------------------------------------------------------------
# boundaries


@dataclass
class Boundary:
    """Polylines per kind (``nishimori``, ``adt_plus``, ``adt_minus``)."""

    segments: dict = field(default_factory=dict)
    dead_init: bool = False
    stall_points: list = field(default_factory=list)

    def add(self, kind: str, pts):
        pts = np.asarray(pts, dtype=float)
        if len(pts):
            self.segments.setdefault(kind, []).append(pts)

    def points(self, kind: Optional[str] = None) -> np.ndarray:
        kinds = [kind] if kind else list(self.segments)
        arrs = [s for k in kinds for s in self.segments.get(k, [])]
        return np.vstack(arrs) if arrs else np.zeros((0, 2))

    def merge(self, other: "Boundary") -> "Boundary":
        out = Boundary({k: list(v) for k, v in self.segments.items()}, self.dead_init or other.dead_init,
                       self.stall_points + other.stall_points)
        for k, segs in other.segments.items():
            for s in segs:
                out.add(k, s)
        return out


def _in_box(pts):
    return np.all((pts >= 0.0) & (pts <= 1.0), axis=1)


def _split_runs(pts, keep):
    # contiguous runs of kept points
    runs, cur = [], []
    for pt, k in zip(pts, keep):
        if k:
            cur.append(pt)
        elif cur:
            runs.append(np.array(cur))
            cur = []
    if cur:
        runs.append(np.array(cur))
    return runs


def nishimori_boundary(pattern: ModularPattern, c, resolution: int = 400) -> Boundary:
    """Locus ``|lambda2 lambda_b(x)| = 1`` clipped to the unit box (one or two labels)."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    p = len(c)
    om = _label_omegas(pattern, p)
    P = c / c.sum()
    # sum_a P_a ((x_a - om_a) / (om_a (1 - om_a)))^2 = q^2 / (lambda2^2 c)
    K = pattern.q ** 2 / (pattern.lambda2 ** 2 * c.sum())
    scale = om * (1.0 - om) * np.sqrt(K / P)
    out = Boundary()
    if p == 1:
        pts = np.array([[om[0] - scale[0]], [om[0] + scale[0]]])
        out.add("nishimori", pts[_in_box(pts)])
        return out
    if p != 2:
        raise ValueError("boundary polylines are drawn for one or two labels only")
    if resolution < 4:
        raise ValueError("resolution must be at least 4")
    th = np.linspace(0.0, 2.0 * np.pi, resolution)
    pts = np.column_stack([om[0] + scale[0] * np.cos(th), om[1] + scale[1] * np.sin(th)])
    keep = _in_box(pts)
    runs = _split_runs(pts, keep)
    # stitch the run crossing theta = 0 back together
    if len(runs) > 1 and keep[0] and keep[-1]:
        runs = [np.vstack([runs[-1], runs[0][1:]])] + runs[1:-1]
    for r in runs:
        out.add("nishimori", r)
    return out


def _hyperplane_segment(normal, offset, om, resolution, orthant=None):
    """Points of ``normal . (x - om) = offset`` inside the box (and orthant) for two labels."""
    n1, n2 = normal
    if abs(n2) >= abs(n1):
        x1 = np.linspace(0.0, 1.0, resolution)
        x2 = om[1] + (offset - n1 * (x1 - om[0])) / n2
    else:
        x2 = np.linspace(0.0, 1.0, resolution)
        x1 = om[0] + (offset - n2 * (x2 - om[1])) / n1
    pts = np.column_stack([x1, x2])
    keep = _in_box(pts)
    if orthant is not None:
        keep &= np.all(np.sign(pts - om) * orthant >= 0, axis=1)
    return _split_runs(pts, keep)


def adt_boundary(pattern: ModularPattern, c, x_init, resolution: int = 400, matched: bool = False) -> Boundary:
    """Locus ``|lambda2 lambda_iso(x, x_hat*)| = 1`` with ``x_hat*`` the stall point of ``x_init``.

    With ``matched=True`` each orthant of ``x - Omega`` uses the initial
    strengths reflected into that orthant (see :func:`matched_init`), and
    the pieces are the ``adt_plus`` hyperplanes restricted to their own
    orthants. For one label the result holds the boundary points; for two,
    polylines clipped to the unit box.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    x0 = np.asarray(x_init, dtype=float)
    p = len(c)
    if x0.shape != (p,):
        raise ValueError("x_init needs one entry per label")
    if p > 2:
        raise ValueError("boundary polylines are drawn for one or two labels only")
    if not pattern.equal_row_sums:
        raise SpectralError("boundary needs equal row sums of W")
    om = _label_omegas(pattern, p)
    q, lam2 = pattern.q, pattern.lambda2
    out = Boundary()
    if matched:
        low, high = (float(np.min(x0)), float(np.max(x0))) if p > 1 else (min(x0[0], 2 * om[0] - x0[0]), max(x0[0], 2 * om[0] - x0[0]))
        orthants = list(itertools.product((-1.0, 1.0), repeat=p))
        inits = [np.where(np.array(o) > 0, high, low) for o in orthants]
    else:
        orthants = [None]
        inits = [x0]
    for o, init in zip(orthants, inits):
        if band_condition(init, pattern, c) <= 1.0:
            out.dead_init = True
            continue
        xs = stall_point(init, pattern, c)
        out.stall_points.append(xs)
        # lambda2^2 / [q Om (1 - Om)]^2 sum c_a (x_a - Om)(xs_a - Om) = +-1
        normal = c * (xs - om) * lam2 ** 2 / (q * om * (1.0 - om)) ** 2
        signs = (1.0,) if matched else (1.0, -1.0)
        for sgn in signs:
            kind = "adt_plus" if sgn > 0 else "adt_minus"
            if p == 1:
                pt = om + sgn / normal
                if _in_box(pt[None, :])[0] and (o is None or np.sign(pt[0] - om[0]) * o[0] >= 0):
                    out.add(kind, pt[None, :])
                continue
            for seg in _hyperplane_segment(normal, sgn, om, resolution, None if o is None else np.array(o)):
                out.add(kind, seg)
    if out.dead_init and not out.segments:
        out.stall_points = []
    return out


def write_boundary_csv(path, boundary: Boundary, header: str = "") -> None:
    """Rows ``x1,x2,kind``; a blank line separates polylines."""
    lines = ["# " + h for h in header.splitlines()] if header else []
    lines.append("x1,x2,kind")
    first = True
    for kind, segs in boundary.segments.items():
        for seg in segs:
            if not first:
                lines.append("")
            first = False
            for pt in seg:
                x2 = repr(float(pt[1])) if len(pt) > 1 else ""
                lines.append(f"{float(pt[0])!r},{x2},{kind}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# infeasibility window


@dataclass(frozen=True)
class InfeasibilityWindow:
    roots: tuple  # real roots in c2 of the squared boundary equation
    window: Optional[tuple]  # c2 interval (within c2 > 0) where the pair is undetectable
    first_label_detectable: bool


def infeasibility_window(c1: float, x, pattern: Optional[ModularPattern] = None) -> InfeasibilityWindow:
    """Range of ``c2`` where ``c1 |x1 - 1/2| + c2 |x2 - 1/2| < sqrt(c1 + c2) / 2``.

    Two equal modules with community structure and corner initial
    estimates. Squaring gives
    ``b^2 c2^2 + (2 c1 a b - 1/4) c2 + c1^2 a^2 - c1/4 = 0``
    with ``a = |x1 - 1/2|``, ``b = |x2 - 1/2|``.
    """
    pattern = pattern or identity_pattern(2)
    if pattern.q != 2 or not np.array_equal(pattern.W, np.eye(2)):
        raise ValueError("infeasibility window is defined for two modules with identity pattern")
    if c1 <= 0:
        raise ValueError("c1 must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape != (2,):
        raise ValueError("x must hold the two strengths (x1, x2)")
    a, b = abs(x[0] - 0.5), abs(x[1] - 0.5)
    first = a > 1.0 / (2.0 * math.sqrt(c1))

    def undetectable(c2):
        return c1 * a + c2 * b < math.sqrt(c1 + c2) / 2.0

    A, B, C = b * b, 2.0 * c1 * a * b - 0.25, c1 * c1 * a * a - c1 / 4.0
    if A == 0.0:
        roots = (-C / B,) if B != 0.0 else ()
    else:
        disc = B * B - 4.0 * A * C
        if disc < 0:
            roots = ()
        else:
            sq = math.sqrt(disc)
            # numerically stable pair
            qq = -0.5 * (B + math.copysign(sq, B))
            roots = tuple(sorted({qq / A, C / qq} if qq != 0.0 else {0.0}))
    # keep roots that solve the unsquared equation with c2 > 0
    roots = tuple(r for r in roots if r > 0 and math.isclose(c1 * a + r * b, math.sqrt(c1 + r) / 2.0, rel_tol=1e-9, abs_tol=1e-12))
    edges = [0.0, *roots, math.inf]
    window = None
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = (lo + hi) / 2.0 if math.isfinite(hi) else max(2.0 * lo, lo + 1.0)
        if mid > 0 and undetectable(mid) and lo > 0:
            window = (lo, hi)
            break
    window = None if window is None else (float(window[0]), float(window[1]))
    return InfeasibilityWindow(tuple(float(r) for r in roots), window, bool(first))
