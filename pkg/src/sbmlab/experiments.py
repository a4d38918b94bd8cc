"""Experiment drivers behind the command-line subcommands.

Seeds: every (operation, cell, sample) triple gets its own
``SeedSequence(master, spawn_key=(op, cell, sample))``, split into
independent streams for graph generation, EM and initial messages, so
results do not depend on worker count or execution order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .bp import init_messages
from .config import ConfigError, ExperimentConfig
from .em import EmConfig, run_em
from .graph_model import (
    LabeledGraph,
    ModelParams,
    ModularPattern,
    ParametrizationError,
    build_affinity,
    generate,
    read_graph,
    write_graph,
)
from .spectral import (
    SpectralError,
    band_radius_trace_bound,
    empirical_spectrum,
    write_spectrum_csv,
)
from .threshold import (
    adt_boundary,
    classify,
    infeasibility_window,
    matched_init,
    nishimori_boundary,
    write_boundary_csv,
)

log = logging.getLogger(__name__)

OP_RUN, OP_SPECTRUM = 1, 2
SNAPSHOT_MAX_N = 500


def seed_streams(master: int, op: int, cell: int, sample: int, k: int = 3):
    return np.random.SeedSequence(master, spawn_key=(op, cell, sample)).spawn(k)


def _prefix(cfg: ExperimentConfig) -> str:
    return f"# {cfg.header()}\n"


def _write_text(path: Path, text: str) -> None:
    # write-then-rename keeps checkpoints whole if interrupted
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(cfg, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(_prefix(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# single EM run (picklable job)


@dataclass(frozen=True)
class RunSpec:
    W: np.ndarray
    per_label: Optional[tuple]
    gamma: tuple
    c: tuple
    x: tuple
    init: tuple
    n: int
    em: dict
    master: int
    cell: int
    sample: int
    bias_weight: float = 0.0


def _pattern(job: RunSpec) -> ModularPattern:
    return ModularPattern(job.W, per_label=job.per_label)


def _graph_for(job: RunSpec, pattern: ModularPattern) -> LabeledGraph:
    g_ss, _, _ = seed_streams(job.master, OP_RUN, job.cell, job.sample)
    return generate(pattern, ModelParams(np.array(job.gamma), job.c, job.x), job.n, g_ss)


def run_one(job: RunSpec, callback=None, graph: Optional[LabeledGraph] = None):
    """Generate (unless given) and fit one instance; returns ``(graph, EmResult)``."""
    pattern = _pattern(job)
    if graph is None:
        graph = _graph_for(job, pattern)
    _, em_ss, msg_ss = seed_streams(job.master, OP_RUN, job.cell, job.sample)
    init = ModelParams(np.full(pattern.q, 1.0 / pattern.q), job.c, job.init)
    msgs = None
    if job.bias_weight > 0.0:
        if graph.planted is None:
            raise ConfigError("biased initial messages need a graph with planted assignments")
        msgs = init_messages(graph, pattern.q, np.random.default_rng(msg_ss), bias=graph.planted, weight=job.bias_weight)
    res = run_em(graph, pattern, init, EmConfig(**job.em), seed=np.random.default_rng(em_ss),
                 messages=msgs, callback=callback)
    return graph, res


def _run_job(job: RunSpec) -> dict:
    try:
        _, res = run_one(job)
    except ParametrizationError as exc:
        return {"cell": job.cell, "sample": job.sample, "status": "skipped", "error": str(exc)}
    return {
        "cell": job.cell,
        "sample": job.sample,
        "status": res.status,
        "overlap": float(res.overlap) if res.overlap is not None else float("nan"),
        "steps": int(res.steps),
        "x_hat": [float(v) for v in res.estimates.x],
    }


RUN_COLUMNS_BASE = ["cell", "sample", "overlap", "steps", "status"]


def _run_rows(results, p):
    rows = []
    for r in results:
        xh = r.get("x_hat", [float("nan")] * p)
        rows.append([r["cell"], r["sample"], r.get("overlap", float("nan")), r.get("steps", 0), r["status"], *xh])
    return rows


def _run_columns(p):
    return RUN_COLUMNS_BASE + [f"x{a + 1}_hat" for a in range(p)]


def _read_cell_file(path: Path, digest: str, p: int):
    lines = path.read_text().splitlines()
    if not lines or f"config_hash={digest}" not in lines[0]:
        return None
    reader = csv.reader(l for l in lines if not l.startswith("#"))
    next(reader)
    out = []
    for row in reader:
        out.append({
            "cell": int(row[0]), "sample": int(row[1]), "overlap": float(row[2]),
            "steps": int(row[3]), "status": row[4], "x_hat": [float(v) for v in row[5:5 + p]],
        })
    return out


def run_sweep(cfg: ExperimentConfig, cells: list, workers: int = 1, cell_dir: Optional[Path] = None) -> list:
    """Run ``samples`` EM fits for every cell; returns per-cell result lists.

    ``cells`` holds dicts with keys ``x``, ``c`` and ``init``. With
    ``cell_dir`` each finished cell is written to its own file and reused
    on restart when the config hash matches.
    """
    pattern = cfg.pattern()
    samples = int(cfg.run["samples"])
    em = {k: v for k, v in cfg.em_config().__dict__.items()}
    q = pattern.q
    gamma = tuple(cfg.model.get("gamma") or [1.0 / q] * q)
    digest = cfg.digest()
    done: dict = {}
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        for idx, cell in enumerate(cells):
            f = cell_dir / f"cell_{idx:05d}.csv"
            if f.exists():
                got = _read_cell_file(f, digest, len(cell["c"]))
                if got is not None and len(got) == samples:
                    done[idx] = got
        if done:
            log.info("resuming: %d of %d cells already complete", len(done), len(cells))

    jobs = []
    for idx, cell in enumerate(cells):
        if idx in done:
            continue
        for s in range(samples):
            jobs.append(RunSpec(
                pattern.W, pattern.per_label, gamma, tuple(cell["c"]), tuple(cell["x"]), tuple(cell["init"]),
                int(cfg.run["n"]), em, cfg.seed, idx, s, float(cfg.run.get("bias_weight", 0.0)),
            ))

    pending: dict = {}

    def finish(r):
        pending.setdefault(r["cell"], []).append(r)
        if len(pending[r["cell"]]) == samples:
            res = sorted(pending.pop(r["cell"]), key=lambda d: d["sample"])
            done[r["cell"]] = res
            if cell_dir is not None:
                p = len(cells[r["cell"]]["c"])
                _write_text(cell_dir / f"cell_{r['cell']:05d}.csv",
                            _csv_text(cfg, _run_columns(p), _run_rows(res, p)))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for r in ex.map(_run_job, jobs, chunksize=1):
                finish(r)
    else:
        for job in jobs:
            finish(_run_job(job))
    return [done[i] for i in range(len(cells))]


def _init_for(cfg: ExperimentConfig, pattern: ModularPattern, x) -> np.ndarray:
    init = cfg.run.get("init", "matched")
    if init == "matched":
        low, high = cfg.run.get("matched", [0.1, 0.9])
        return matched_init(x, pattern, low, high)
    init = np.asarray(init, dtype=float)
    if init.shape != (len(cfg.model["c"]),):
        raise ConfigError("run.init needs one strength per label")
    return init


def _summary(vals):
    v = np.asarray([x for x in vals if np.isfinite(x)], dtype=float)
    if len(v) == 0:
        return dict(mean=float("nan"), median=float("nan"), q1=float("nan"), q3=float("nan"), n=0)
    return dict(mean=float(v.mean()), median=float(np.median(v)), q1=float(np.quantile(v, 0.25)),
                q3=float(np.quantile(v, 0.75)), n=int(len(v)))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig) -> list:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pattern = cfg.pattern()
    params = cfg.params()
    build_affinity(pattern, params, n=int(cfg.run["n"]))
    paths = []
    for s in range(int(cfg.run["samples"])):
        g_ss, _, _ = seed_streams(cfg.seed, OP_RUN, 0, s)
        g = generate(pattern, params, int(cfg.run["n"]), g_ss)
        path = out / f"graph_s{s}.txt"
        write_graph(path, g, header=cfg.header())
        paths.append(path)
    return paths


def cmd_infer(cfg: ExperimentConfig, workers: int = 1) -> list:
    """Fit each sample; rows match a one-cell phase diagram at the planted strengths."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pattern = cfg.pattern()
    params = cfg.params()
    init = _init_for(cfg, pattern, params.x)
    em = cfg.em_config().__dict__
    src = cfg.raw["input"].get("graph")
    given = read_graph(src) if src else None
    results = []
    for s in range(int(cfg.run["samples"])):
        job = RunSpec(pattern.W, pattern.per_label, tuple(params.gamma), tuple(params.c), tuple(params.x),
                       tuple(init), int(cfg.run["n"]), em, cfg.seed, 0, s, float(cfg.run.get("bias_weight", 0.0)))
        graph, res = run_one(job, graph=given)
        res.trajectory.to_csv(out / f"trajectory_s{s}.csv", header=cfg.header())
        _write_text(out / f"assignment_s{s}.csv",
                    _csv_text(cfg, ["vertex", "module"], [[i, int(m)] for i, m in enumerate(res.assignment)]))
        results.append({
            "cell": 0, "sample": s, "status": res.status,
            "overlap": float(res.overlap) if res.overlap is not None else float("nan"),
            "steps": int(res.steps), "x_hat": [float(v) for v in res.estimates.x],
        })
    p = params.p
    _write_text(out / "runs.csv", _csv_text(cfg, _run_columns(p), _run_rows(results, p)))
    return results


def grid_points(cfg: ExperimentConfig) -> list:
    p = len(cfg.model["c"])
    grid = cfg.section("grid")
    res = int(grid.get("resolution", 21))
    if p not in (1, 2):
        raise ConfigError("phase diagrams are swept over one or two labels")
    axes = []
    for a in range(p):
        lo, hi = grid.get(f"x{a + 1}", [0.0, 1.0])
        axes.append(np.linspace(float(lo), float(hi), res))
    if p == 1:
        return [(float(v),) for v in axes[0]]
    return [(float(u), float(v)) for u in axes[0] for v in axes[1]]


def empirical_contour(points, values, level: float, res: int) -> np.ndarray:
    """Linear-interpolated crossings of ``level`` between neighbouring grid cells (two labels)."""
    P = np.asarray(points, dtype=float).reshape(res, res, 2)
    V = np.asarray(values, dtype=float).reshape(res, res)
    out = []
    for i in range(res):
        for j in range(res):
            for di, dj in ((1, 0), (0, 1)):
                k, l = i + di, j + dj
                if k >= res or l >= res:
                    continue
                a, b = V[i, j] - level, V[k, l] - level
                if np.isfinite(a) and np.isfinite(b) and a * b < 0:
                    t = a / (a - b)
                    out.append(P[i, j] + t * (P[k, l] - P[i, j]))
    return np.array(out).reshape(-1, 2)


def cmd_phase_diagram(cfg: ExperimentConfig, workers: int = 1) -> dict:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pattern = cfg.pattern()
    c = [float(v) for v in cfg.model["c"]]
    pts = grid_points(cfg)
    cells = [{"x": x, "c": c, "init": _init_for(cfg, pattern, x)} for x in pts]
    results = run_sweep(cfg, cells, workers, cell_dir=out / "cells")

    p = len(c)
    rows, medians = [], []
    for idx, (cell, res) in enumerate(zip(cells, results)):
        st = _summary([r.get("overlap", float("nan")) for r in res if r["status"] != "skipped"])
        status = "skipped" if all(r["status"] == "skipped" for r in res) else "ok"
        try:
            region = classify(cell["x"], cell["init"], pattern, c).classification
        except (SpectralError, ValueError):
            region = "n/a"
        medians.append(st["median"])
        rows.append([idx, *map(float, cell["x"]), *map(float, cell["init"]), st["mean"], st["median"], st["n"], status, region])
    cols = ["cell"] + [f"x{a + 1}" for a in range(p)] + [f"init{a + 1}" for a in range(p)] + [
        "mean_overlap", "median_overlap", "n", "status", "classification"]
    _write_text(out / "phase_diagram.csv", _csv_text(cfg, cols, rows))
    _write_text(out / "runs.csv", _csv_text(cfg, _run_columns(p), _run_rows([r for res in results for r in res], p)))

    if p == 2:
        res = int(cfg.section("grid").get("resolution", 21))
        level = 0.5 + float(cfg.section("phase").get("delta", 0.03))
        contour = empirical_contour(pts, medians, level, res) if res > 1 else np.zeros((0, 2))
        _write_text(out / "empirical_boundary.csv", _csv_text(cfg, ["x1", "x2"], contour.tolist()))

    if p <= 2 and pattern.equal_row_sums:
        bres = int(cfg.section("phase").get("boundary_resolution", 400))
        bnd = nishimori_boundary(pattern, c, bres)
        init = cfg.run.get("init", "matched")
        if init == "matched":
            low, high = cfg.run.get("matched", [0.1, 0.9])
            x0 = np.array([low, high][:p]) if p == 2 else np.array([high])
            bnd = bnd.merge(adt_boundary(pattern, c, x0, bres, matched=True))
        else:
            bnd = bnd.merge(adt_boundary(pattern, c, np.asarray(init, dtype=float), bres))
        write_boundary_csv(out / "boundary.csv", bnd, header=cfg.header())
    return {"cells": cells, "results": results, "medians": medians}


def cmd_infeasibility(cfg: ExperimentConfig, workers: int = 1) -> dict:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pattern = cfg.pattern()
    if pattern.q != 2 or not np.array_equal(pattern.W, np.eye(2)):
        raise ConfigError("infeasibility runs need q=2 with the identity pattern")
    inf = cfg.section("infeasibility")
    c1 = float(inf["c1"])
    x = [float(v) for v in inf["x"]]
    c2s = [float(v) for v in inf["c2"]]
    if not c2s:
        raise ConfigError("infeasibility.c2 must be a non-empty list")
    init = _init_for(cfg, pattern, x)
    cells = [{"x": x, "c": [c1, c2], "init": init} for c2 in c2s]
    # the per-c2 sample count lives in the infeasibility block
    sub = ExperimentConfig({**cfg.raw, "run": {**cfg.run, "samples": int(inf.get("samples", 30))}}, cfg.path)
    results = run_sweep(sub, cells, workers, cell_dir=out / "cells")

    rows, summary = [], []
    for c2, res in zip(c2s, results):
        for r in res:
            rows.append([c2, r["sample"], r.get("overlap", float("nan")), r.get("steps", 0), r["status"]])
        st = _summary([r.get("overlap", float("nan")) for r in res])
        summary.append([c2, st["median"], st["q1"], st["q3"], st["mean"], st["n"]])
    _write_text(out / "infeasibility_runs.csv", _csv_text(cfg, ["c2", "sample", "overlap", "steps", "status"], rows))
    _write_text(out / "infeasibility_summary.csv", _csv_text(cfg, ["c2", "median", "q1", "q3", "mean", "n"], summary))
    win = infeasibility_window(c1, x, pattern)
    doc = {"header": cfg.header(), "c1": c1, "x": x, "roots": list(win.roots),
           "window": list(win.window) if win.window else None,
           "first_label_detectable": win.first_label_detectable}
    _write_text(out / "infeasibility_window.json", json.dumps(doc, indent=2) + "\n")
    return {"c2": c2s, "results": results, "medians": [s[1] for s in summary], "window": win}


def cmd_spectrum(cfg: ExperimentConfig, workers: int = 1) -> list:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pattern = cfg.pattern()
    params = cfg.params()
    spec_cfg = cfg.section("spectrum")
    estimates = spec_cfg.get("estimates") or [list(params.x)]
    mode = spec_cfg.get("mode", "dense")
    src = cfg.raw["input"].get("graph")
    rows = []
    for s in range(int(cfg.run["samples"])):
        g_ss, probe_ss, _ = seed_streams(cfg.seed, OP_SPECTRUM, 0, s)
        graph = read_graph(src) if src else generate(pattern, params, int(cfg.run["n"]), g_ss)
        for k, xh in enumerate(estimates):
            est = params.with_x(xh)
            summ = empirical_spectrum(graph, est, pattern, mode, planted=params, k=int(spec_cfg.get("k", 50)))
            write_spectrum_csv(out / f"spectrum_e{k}_s{s}.csv", summ.eigenvalues, header=cfg.header())
            extra = {}
            d = int(spec_cfg.get("trace_d", 0))
            if d >= 2:
                tb = band_radius_trace_bound(graph, est, pattern, d, int(spec_cfg.get("probes", 32)),
                                             seed=np.random.default_rng(probe_ss))
                extra = {"trace_bound": tb.value, "trace_bound_stderr": tb.stderr, "trace_d": d}
            doc = {"header": cfg.header(), "sample": s, "estimates": list(map(float, xh)), **summ.to_dict(), **extra}
            _write_text(out / f"spectrum_e{k}_s{s}.json", json.dumps(doc, indent=2) + "\n")
            iso = max((z.real for z in summ.isolated_eigenvalues), key=abs, default=float("nan"))
            rows.append([s, k, *map(float, xh), summ.band_radius_formula, summ.band_radius_empirical,
                         summ.iso_formula if summ.iso_formula is not None else float("nan"), float(iso),
                         extra.get("trace_bound", float("nan"))])
    p = params.p
    cols = ["sample", "estimate"] + [f"x{a + 1}_hat" for a in range(p)] + [
        "band_formula", "band_empirical", "iso_formula", "iso_empirical", "trace_bound"]
    _write_text(out / "spectrum_summary.csv", _csv_text(cfg, cols, rows))
    return rows


def cmd_trajectory(cfg: ExperimentConfig, workers: int = 1) -> list:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pattern = cfg.pattern()
    params = cfg.params()
    init = cfg.run.get("init")
    if init == "matched":
        init = _init_for(cfg, pattern, params.x)
    snaps = [int(t) for t in cfg.section("trajectory").get("snapshot_steps", [])]
    n = int(cfg.run["n"])
    if snaps and n > SNAPSHOT_MAX_N:
        raise ConfigError(f"spectrum snapshots need N <= {SNAPSHOT_MAX_N} (dense eigensolve), got N={n}")
    em = cfg.em_config().__dict__
    results = []
    for s in range(int(cfg.run["samples"])):
        job = RunSpec(pattern.W, pattern.per_label, tuple(params.gamma), tuple(params.c), tuple(params.x),
                       tuple(map(float, init)), n, em, cfg.seed, 0, s, float(cfg.run.get("bias_weight", 0.0)))
        graph = _graph_for(job, pattern)

        def snapshot(step, est, msgs, s=s, graph=graph):
            if step in snaps:
                summ = empirical_spectrum(graph, ModelParams(est.gamma, est.c, est.x), pattern, "dense", planted=params)
                write_spectrum_csv(out / f"snapshot_s{s}_t{step}.csv", summ.eigenvalues, header=cfg.header())

        _, res = run_one(job, callback=snapshot if snaps else None, graph=graph)
        res.trajectory.to_csv(out / f"trajectory_s{s}.csv", header=cfg.header())
        results.append(res)
    return results


COMMANDS = {
    "generate": cmd_generate,
    "infer": cmd_infer,
    "spectrum": cmd_spectrum,
    "phase-diagram": cmd_phase_diagram,
    "infeasibility": cmd_infeasibility,
    "trajectory": cmd_trajectory,
}
