"""Experiment configuration: YAML files with a version key, validated into plain dataclasses.

Layout (every block optional except ``kind`` and ``model``)::

    version: 1
    kind: phase-diagram        # generate | infer | spectrum | phase-diagram | infeasibility | trajectory
    model:
      q: 2
      pattern: identity        # identity | chain4 | bipartite | explicit 0/1 matrix
      per_label: null          # optional list of patterns, one per label
      gamma: null              # null -> equal module sizes
      c: [3, 5]
      x: [0.1, 0.6]            # planted strengths (not used by phase-diagram)
    grid: {x1: [0, 1], x2: [0, 1], resolution: 21}
    run:
      n: 10000
      samples: 5
      seed: 0
      init: matched            # or an explicit list of strengths
      matched: [0.1, 0.9]      # low/high strengths used by the matched init
      bias_weight: 0.0         # planted-biased initial messages (trajectory)
      em: {max_steps: 2000, tol: 1.0e-6, sweeps_per_mstep: 1, learning_rate: 1.0,
           restrict_affinity: true, damping: 0.0}
    phase: {delta: 0.03, boundary_resolution: 400}
    infeasibility: {c1: 3, x: [0.85, 0.45], c2: [0.5, 1, 2, 3, 4, 5]}
    spectrum: {estimates: [[0.1, 0.9]], mode: dense, k: 50, trace_d: 10, probes: 32}
    trajectory: {snapshot_steps: []}
    input: {graph: null}       # graph file for infer/spectrum instead of generating
    output: {dir: out}
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .em import EmConfig
from .graph_model import CHAIN4, ModelParams, ModularPattern, ParametrizationError, PatternError

CONFIG_VERSION = 1
KINDS = ("generate", "infer", "spectrum", "phase-diagram", "infeasibility", "trajectory")

DEFAULTS: dict = {
    "grid": {"resolution": 21},
    "run": {"n": 10000, "samples": 5, "seed": 0, "init": "matched", "matched": [0.1, 0.9], "bias_weight": 0.0, "em": {}},
    "phase": {"delta": 0.03, "boundary_resolution": 400},
    "infeasibility": {"samples": 30},
    "spectrum": {"mode": "dense", "k": 50, "trace_d": 0, "probes": 32},
    "trajectory": {"snapshot_steps": []},
    "input": {"graph": None},
    "output": {"dir": "out"},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def named_pattern(value, q: int) -> np.ndarray:
    if isinstance(value, str):
        if value == "identity":
            return np.eye(q, dtype=np.int64)
        if value == "bipartite":
            return 1 - np.eye(q, dtype=np.int64)
        if value == "chain4":
            if q != 4:
                raise ConfigError("pattern 'chain4' needs q = 4")
            return np.array(CHAIN4)
        raise ConfigError(f"unknown pattern name {value!r}")
    W = np.asarray(value)
    if W.shape != (q, q):
        raise ConfigError(f"explicit pattern must be {q}x{q}, got shape {W.shape}")
    return W


@dataclass
class ExperimentConfig:
    raw: dict
    path: Optional[Path] = None

    # ---- accessors
    @property
    def kind(self) -> str:
        return self.raw["kind"]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def run(self) -> dict:
        return self.raw["run"]

    @property
    def seed(self) -> int:
        return int(self.run["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["output"]["dir"])

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def pattern(self) -> ModularPattern:
        q = int(self.model["q"])
        W = named_pattern(self.model.get("pattern", "identity"), q)
        per = self.model.get("per_label")
        per = tuple(named_pattern(s, q) for s in per) if per else None
        try:
            return ModularPattern(W, per_label=per)
        except PatternError as exc:
            raise ConfigError(str(exc)) from exc

    def params(self, x=None, c=None) -> ModelParams:
        q = int(self.model["q"])
        gamma = self.model.get("gamma") or [1.0 / q] * q
        c = self.model["c"] if c is None else c
        x = self.model.get("x") if x is None else x
        if x is None:
            raise ConfigError("model.x (planted strengths) is required for this experiment")
        return ModelParams(np.asarray(gamma, dtype=float), c, x)

    def em_config(self) -> EmConfig:
        try:
            return EmConfig(**self.run.get("em", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"run.em: {exc}") from exc

    def digest(self) -> str:
        """Hash of the canonical config (output directory excluded)."""
        d = copy.deepcopy(self.raw)
        d.pop("output", None)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self) -> str:
        from . import __version__

        return f"sbmlab {__version__} kind={self.kind} config_hash={self.digest()} seed={self.seed}"


def validate(raw: dict) -> None:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw.get('version')!r} (expected {CONFIG_VERSION})")
    if raw.get("kind") not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {raw.get('kind')!r}")
    model = raw.get("model")
    if not isinstance(model, dict) or "q" not in model or "c" not in model:
        raise ConfigError("model block needs at least q and c")
    if int(model["q"]) < 2:
        raise ConfigError("model.q must be at least 2")
    run = raw["run"]
    if int(run["samples"]) < 1:
        raise ConfigError("run.samples must be >= 1")
    if int(run["n"]) < 2:
        raise ConfigError("run.n must be >= 2")
    if raw["kind"] == "phase-diagram" and int(raw["grid"]["resolution"]) < 1:
        raise ConfigError("grid.resolution must be >= 1")
    init = run.get("init")
    if not (init == "matched" or isinstance(init, (list, tuple))):
        raise ConfigError("run.init must be 'matched' or a list of strengths")
    if not 0.0 <= float(run.get("bias_weight", 0.0)) <= 1.0:
        raise ConfigError("run.bias_weight must lie in [0, 1]")
    graph = raw["input"].get("graph")
    if graph is not None and not Path(graph).exists():
        raise ConfigError(f"input graph file {graph} does not exist")
    if raw["kind"] == "infeasibility":
        inf = raw["infeasibility"]
        if not inf.get("c2"):
            raise ConfigError("infeasibility.c2 must be a non-empty list")
        if "c1" not in inf or "x" not in inf:
            raise ConfigError("infeasibility block needs c1 and x")
    if raw["kind"] == "spectrum" and raw["spectrum"].get("mode") not in ("dense", "iterative"):
        raise ConfigError("spectrum.mode must be 'dense' or 'iterative'")


def from_dict(raw: dict, path=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    merged = _merge(DEFAULTS, raw)
    validate(merged)
    cfg = ExperimentConfig(merged, Path(path) if path else None)
    # surface parameter errors early
    cfg.pattern()
    cfg.em_config()
    try:
        if cfg.model.get("x") is not None:
            cfg.params()
    except ParametrizationError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw, path)


def override(cfg: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    raw: dict[str, Any] = copy.deepcopy(cfg.raw)
    if seed is not None:
        raw["run"]["seed"] = int(seed)
    if out is not None:
        raw["output"]["dir"] = str(out)
    return ExperimentConfig(raw, cfg.path)
