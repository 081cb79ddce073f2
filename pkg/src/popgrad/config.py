"""Experiment configuration files.

A config is a JSON object with a ``schema`` field equal to
:data:`SCHEMA_VERSION`. Unknown keys anywhere are errors so that a typo can
never silently fall back to a default.

Example::

    {
      "schema": "popgrad.experiment/1",
      "name": "demo",
      "teacher": {"d": 20, "norm_v": 1.0},
      "init": {"n": [1, 2], "sigma": 0.1},
      "run": {"mode": "discrete_gd", "eta": 0.05, "t_end": 1000, "record_every": 10},
      "checkers": ["theta_bound", "rate"],
      "outputs": {"csv_path": "{name}_n{n}_s{seed}_{mode}.csv", "json_path": "{name}.json"},
      "seeds": [0, 1]
    }

Output paths are resolved against the output directory given on the
command line. ``teacher`` takes either ``seed`` (random direction) or
``vector`` (explicit); with neither, the teacher is ``norm_v * e_1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .diagnostics import CHECKERS, PhaseThresholds
from .dynamics import DEFAULT_D, DEFAULT_ETA, DEFAULT_NORM_V, DEFAULT_SIGMA, InitSpec, RunConfig
from .errors import BadParam, ConfigError
from .geometry import Teacher

SCHEMA_VERSION = "popgrad.experiment/1"
DEFAULT_CSV = "{name}_n{n}_s{seed}_{mode}.csv"
MODES = ("discrete_gd", "gradient_flow")

_TOP_KEYS = {"schema", "name", "teacher", "init", "run", "thresholds", "checkers", "outputs", "seeds"}
_TEACHER_KEYS = {"d", "norm_v", "seed", "vector"}
_INIT_KEYS = {"n", "sigma"}
_RUN_KEYS = {"mode", "eta", "t_end", "record_every", "log_records", "stop_loss",
             "ode_rel_tol", "ode_abs_tol", "max_steps"}
_THRESHOLD_KEYS = {f.name for f in fields(PhaseThresholds)}
_OUTPUT_KEYS = {"csv_path", "json_path", "svg_path"}


@dataclass(frozen=True)
class TeacherSpec:
    d: int = DEFAULT_D
    norm_v: float = DEFAULT_NORM_V
    seed: Optional[int] = None
    vector: Optional[tuple] = None

    def build(self) -> Teacher:
        if self.vector is not None:
            return Teacher.from_vector(self.vector)
        if self.seed is not None:
            return Teacher.random(self.d, self.norm_v, self.seed)
        return Teacher.canonical(self.d, self.norm_v)


@dataclass(frozen=True)
class Outputs:
    csv_path: str = DEFAULT_CSV
    json_path: str = "{name}.json"
    svg_path: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    teacher: TeacherSpec
    n_values: tuple
    sigma: float
    modes: tuple
    run: dict
    thresholds: PhaseThresholds
    checkers: tuple
    outputs: Outputs
    seeds: tuple = field(default=(0,))

    def run_config(self, mode: str) -> RunConfig:
        return RunConfig(mode=mode, **self.run)

    def init_spec(self, n: int, seed: int) -> InitSpec:
        return InitSpec(n=n, d=self.teacher.d, sigma=self.sigma, seed=seed)

    def tasks(self):
        """Every ``(n, seed, mode)`` combination in a fixed order."""
        return [(n, s, m) for n in self.n_values for s in self.seeds for m in self.modes]


def _require_obj(value, path):
    if not isinstance(value, dict):
        raise ConfigError(path, "must be a JSON object")
    return value


def _check_keys(obj, allowed, path):
    extra = sorted(set(obj) - allowed)
    if extra:
        where = f"{path}." if path else ""
        raise ConfigError(where + extra[0], f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _number(value, path, *, positive=False, nonneg=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, "must be a number")
    if integer and (not float(value).is_integer()):
        raise ConfigError(path, "must be an integer")
    if not np.isfinite(value):
        raise ConfigError(path, "must be finite")
    if positive and not value > 0:
        raise ConfigError(path, "must be positive")
    if nonneg and value < 0:
        raise ConfigError(path, "must be nonnegative")
    return int(value) if integer else float(value)


def _seed(value, path):
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
        raise ConfigError(path, "must be an unsigned 64-bit integer")
    return value


def parse_config(data: dict) -> ExperimentConfig:
    data = _require_obj(data, "<root>")
    _check_keys(data, _TOP_KEYS, "")
    if data.get("schema") != SCHEMA_VERSION:
        raise ConfigError("schema", f"must be {SCHEMA_VERSION!r}")
    name = data.get("name", "experiment")
    if not isinstance(name, str) or not name or any(c in name for c in "/\\"):
        raise ConfigError("name", "must be a nonempty string without path separators")

    t = _require_obj(data.get("teacher", {}), "teacher")
    _check_keys(t, _TEACHER_KEYS, "teacher")
    vector = None
    if "vector" in t:
        if "seed" in t:
            raise ConfigError("teacher.vector", "give either vector or seed, not both")
        vec = t["vector"]
        if not isinstance(vec, list) or not vec:
            raise ConfigError("teacher.vector", "must be a nonempty list of numbers")
        vector = tuple(_number(x, f"teacher.vector[{i}]") for i, x in enumerate(vec))
        if not any(vector):
            raise ConfigError("teacher.vector", "must be nonzero")
    d = _number(t.get("d", len(vector) if vector else DEFAULT_D), "teacher.d", positive=True, integer=True)
    if vector is not None and d != len(vector):
        raise ConfigError("teacher.d", "must equal the length of teacher.vector")
    norm_v = float(np.linalg.norm(vector)) if vector else _number(t.get("norm_v", DEFAULT_NORM_V),
                                                                  "teacher.norm_v", positive=True)
    teacher = TeacherSpec(d, norm_v, _seed(t["seed"], "teacher.seed") if "seed" in t else None, vector)

    ini = _require_obj(data.get("init", {}), "init")
    _check_keys(ini, _INIT_KEYS, "init")
    n_raw = ini.get("n", [1])
    n_list = n_raw if isinstance(n_raw, list) else [n_raw]
    if not n_list:
        raise ConfigError("init.n", "must list at least one width")
    n_values = tuple(_number(x, "init.n", positive=True, integer=True) for x in n_list)
    sigma = _number(ini.get("sigma", DEFAULT_SIGMA), "init.sigma", positive=True)

    run = dict(_require_obj(data.get("run", {}), "run"))
    _check_keys(run, _RUN_KEYS, "run")
    mode_raw = run.pop("mode", "discrete_gd")
    modes = tuple(mode_raw if isinstance(mode_raw, list) else [mode_raw])
    if not modes or any(m not in MODES for m in modes):
        raise ConfigError("run.mode", f"must be one of {list(MODES)} or a list of them")
    run_kwargs = {}
    if "eta" in run or "discrete_gd" in modes:
        run_kwargs["eta"] = _number(run.get("eta", DEFAULT_ETA), "run.eta", positive=True)
    if "t_end" in run:
        run_kwargs["t_end"] = _number(run["t_end"], "run.t_end", positive=True)
    if "record_every" in run:
        run_kwargs["record_every"] = _number(run["record_every"], "run.record_every", positive=True)
    for key in ("log_records", "max_steps"):
        if key in run:
            run_kwargs[key] = _number(run[key], f"run.{key}", nonneg=True, integer=True)
    if "stop_loss" in run:
        run_kwargs["stop_loss"] = _number(run["stop_loss"], "run.stop_loss", nonneg=True)
    for key in ("ode_rel_tol", "ode_abs_tol"):
        if key in run:
            run_kwargs[key] = _number(run[key], f"run.{key}", positive=True)
    if "gradient_flow" in modes:
        run_kwargs["keep_dense"] = True  # the separation checker samples between records
    for m in modes:
        try:
            RunConfig(mode=m, **run_kwargs)
        except BadParam as exc:
            raise ConfigError("run", str(exc)) from None

    th = _require_obj(data.get("thresholds", {}), "thresholds")
    _check_keys(th, _THRESHOLD_KEYS, "thresholds")
    try:
        thresholds = PhaseThresholds(**{k: _number(v, f"thresholds.{k}", positive=True) for k, v in th.items()})
    except BadParam as exc:
        raise ConfigError("thresholds", str(exc)) from None

    checkers = data.get("checkers", list(CHECKERS))
    if not isinstance(checkers, list) or not all(isinstance(c, str) for c in checkers):
        raise ConfigError("checkers", "must be a list of checker names")
    unknown = [c for c in checkers if c not in CHECKERS]
    if unknown:
        raise ConfigError("checkers", f"unknown checker {unknown[0]!r}; valid names: {', '.join(CHECKERS)}")
    if len(set(checkers)) != len(checkers):
        raise ConfigError("checkers", "names must be unique")

    out = _require_obj(data.get("outputs", {}), "outputs")
    _check_keys(out, _OUTPUT_KEYS, "outputs")
    for key, value in out.items():
        if value is not None and (not isinstance(value, str) or not value):
            raise ConfigError(f"outputs.{key}", "must be a nonempty string")
    outputs = Outputs(out.get("csv_path", DEFAULT_CSV), out.get("json_path", "{name}.json"), out.get("svg_path"))
    try:
        outputs.csv_path.format(name=name, n=1, seed=0, mode="discrete_gd")
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError("outputs.csv_path", f"bad placeholder {exc}") from None
    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "must be a nonempty list")
    seeds = tuple(_seed(s, f"seeds[{i}]") for i, s in enumerate(seeds))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "must be unique")

    tasks = [(n, s, m) for n in n_values for s in seeds for m in modes]
    paths = {outputs.csv_path.format(name=name, n=n, seed=s, mode=m) for n, s, m in tasks}
    if len(paths) != len(tasks):
        raise ConfigError("outputs.csv_path", "must contain enough of {n}, {seed}, {mode} to keep runs apart")

    return ExperimentConfig(name, teacher, n_values, sigma, modes, run_kwargs, thresholds,
                            tuple(checkers), outputs, seeds)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return parse_config(data)
