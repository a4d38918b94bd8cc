import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from sbmlab import cli, experiments
from sbmlab.bp import BPError
from sbmlab.graph_model import read_graph

MODEL = {"q": 2, "pattern": "identity", "c": [3, 5], "x": [0.1, 0.6]}
RUN = {"n": 300, "samples": 2, "seed": 5, "init": [0.1, 0.9], "em": {"max_steps": 30}}


def write_cfg(tmp_path, name="cfg.yaml", **blocks):
    doc = {"version": 1, **blocks}
    doc.setdefault("model", MODEL)
    doc.setdefault("run", RUN)
    doc.setdefault("output", {"dir": str(tmp_path / "out")})
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def data_lines(path):
    return [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]


def test_generate_and_read(tmp_path):
    cfg = write_cfg(tmp_path, kind="generate")
    assert cli.main(["generate", "--config", cfg]) == 0
    g = read_graph(tmp_path / "out" / "graph_s1.txt")
    assert g.n == 300 and g.p == 2


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["infer", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: 2\nkind: infer\nmodel: {q: 2, c: [3]}\n")
    assert cli.main(["infer", "--config", str(bad)]) == 2
    # kind must match the subcommand
    assert cli.main(["spectrum", "--config", write_cfg(tmp_path, kind="infer")]) == 2
    # negative affinity
    neg = write_cfg(tmp_path, "neg.yaml", kind="infer", model={**MODEL, "x": [1.5, 0.5]})
    assert cli.main(["infer", "--config", neg]) == 2
    empty = write_cfg(tmp_path, "inf.yaml", kind="infeasibility", infeasibility={"c1": 3, "x": [0.85, 0.45], "c2": []})
    assert cli.main(["infeasibility", "--config", empty]) == 2
    big = write_cfg(tmp_path, "traj.yaml", kind="trajectory", run={**RUN, "n": 600},
                    trajectory={"snapshot_steps": [0]})
    assert cli.main(["trajectory", "--config", big]) == 2
    assert "N <= 500" in capsys.readouterr().err


def test_numeric_failure_exit_3(tmp_path, monkeypatch):
    def boom(cfg, workers=1):
        raise BPError("contradiction")

    monkeypatch.setitem(experiments.COMMANDS, "infer", boom)
    monkeypatch.setattr(cli, "COMMANDS", experiments.COMMANDS)
    assert cli.main(["infer", "--config", write_cfg(tmp_path, kind="infer")]) == 3


def test_infer_reproducible_with_headers(tmp_path):
    cfg = write_cfg(tmp_path, kind="infer")
    assert cli.main(["infer", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["infer", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for name in ("runs.csv", "trajectory_s0.csv", "assignment_s1.csv"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        assert a == b
        assert a.startswith(b"# sbmlab ") and b"config_hash=" in a.splitlines()[0]
    assert cli.main(["infer", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "6"]) == 0
    assert (tmp_path / "c" / "runs.csv").read_bytes() != (tmp_path / "a" / "runs.csv").read_bytes()


def test_one_cell_grid_equals_infer(tmp_path):
    inf = write_cfg(tmp_path, "i.yaml", kind="infer")
    pd = write_cfg(tmp_path, "p.yaml", kind="phase-diagram",
                   grid={"x1": [0.1, 0.1], "x2": [0.6, 0.6], "resolution": 1})
    assert cli.main(["infer", "--config", inf, "--out", str(tmp_path / "i")]) == 0
    assert cli.main(["phase-diagram", "--config", pd, "--out", str(tmp_path / "p")]) == 0
    assert data_lines(tmp_path / "i" / "runs.csv") == data_lines(tmp_path / "p" / "runs.csv")


def test_phase_diagram_resume_and_workers(tmp_path):
    grid = {"x1": [0.1, 0.9], "x2": [0.1, 0.9], "resolution": 2}
    pd = write_cfg(tmp_path, kind="phase-diagram", grid=grid, run={**RUN, "init": "matched"})
    out = tmp_path / "out"
    assert cli.main(["phase-diagram", "--config", pd]) == 0
    first = (out / "phase_diagram.csv").read_bytes()
    cells = sorted((out / "cells").glob("cell_*.csv"))
    assert len(cells) == 4
    # a tampered checkpoint is reused verbatim, proving the cell was not rerun
    lines = cells[0].read_text().splitlines()
    row = lines[2].split(",")
    row[2] = "0.123"
    lines[2] = ",".join(row)
    text = "\n".join(lines) + "\n"
    cells[0].write_text(text)
    assert cli.main(["phase-diagram", "--config", pd]) == 0
    assert data_lines(cells[0]) == [l for l in text.splitlines() if not l.startswith("#")]
    assert "0.123" in data_lines(out / "runs.csv")[1]
    # a different config hash forces recomputation
    assert cli.main(["phase-diagram", "--config", pd, "--seed", "9", "--workers", "2"]) == 0
    assert "seed=9" in cells[0].read_text().splitlines()[0]
    assert cli.main(["phase-diagram", "--config", pd, "--out", str(tmp_path / "fresh"), "--workers", "2"]) == 0
    assert (tmp_path / "fresh" / "phase_diagram.csv").read_bytes() == first
    bnd = data_lines(out / "boundary.csv")
    assert bnd[0] == "x1,x2,kind" and {"nishimori", "adt_plus"} <= {l.split(",")[-1] for l in bnd[1:] if l}


def test_infeasibility_outputs(tmp_path):
    cfg = write_cfg(tmp_path, kind="infeasibility", model={"q": 2, "pattern": "identity", "c": [3, 1]},
                    infeasibility={"c1": 3, "x": [0.85, 0.45], "c2": [1, 3], "samples": 2})
    assert cli.main(["infeasibility", "--config", cfg]) == 0
    doc = json.loads((tmp_path / "out" / "infeasibility_window.json").read_text())
    assert doc["roots"] == pytest.approx([2.5425, 55.4575], abs=1e-3)
    summ = data_lines(tmp_path / "out" / "infeasibility_summary.csv")
    assert summ[0].startswith("c2,median") and len(summ) == 3


def test_spectrum_and_trajectory(tmp_path):
    run = {**RUN, "n": 120, "samples": 1}
    sp = write_cfg(tmp_path, "s.yaml", kind="spectrum", run=run,
                   spectrum={"estimates": [[0.1, 0.9]], "trace_d": 4, "probes": 4})
    assert cli.main(["spectrum", "--config", sp]) == 0
    doc = json.loads((tmp_path / "out" / "spectrum_e0_s0.json").read_text())
    assert doc["band_radius_formula"] > 0 and "trace_bound" in json.dumps(doc)
    tr = write_cfg(tmp_path, "t.yaml", kind="trajectory", run=run, trajectory={"snapshot_steps": [0, 2]},
                   output={"dir": str(tmp_path / "t")})
    assert cli.main(["trajectory", "--config", tr]) == 0
    assert (tmp_path / "t" / "snapshot_s0_t2.csv").exists()
    rows = data_lines(tmp_path / "t" / "trajectory_s0.csv")
    assert "delta_tv" in rows[0] and "xi_var_1" in rows[0]


def test_seed_streams_distinct():
    a = experiments.seed_streams(1, 1, 0, 0)
    b = experiments.seed_streams(1, 1, 0, 1)
    draws = {tuple(np.random.default_rng(s).integers(0, 2**32, 4)) for s in (*a, *b)}
    assert len(draws) == 6
