"""Experiment configuration: JSON schema, validation and object construction.

Errors are reported as :class:`ConfigError` carrying the config path and the
line of the offending entry, e.g. ``toy.json:7: designer.budget: ...``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .acquisition import GAMMA_VARIANTS, METHODS, AcquisitionSpec
from .designer import INITIAL_DESIGNS, NOISE_MODES, REFIT_SCHEDULES, DesignerConfig, FitSettings
from .gp import KERNEL_FORMS, KernelSpec, min_fit_size
from .problems import Problem, make_problem

PROBLEMS = ("toy1d", "synth2d", "sir")

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

ACQUISITION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method"],
    "properties": {
        "method": {"enum": list(METHODS)},
        "ucb_scale": {"oneOf": [{"type": "number", "minimum": 0},
                                {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}]},
        "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
        "gamma_variant": {"enum": list(GAMMA_VARIANTS)},
        "allocation": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
    },
}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "restarts": _pos_int,
        "fit_nugget": {"type": "boolean"},
        "trend": {"type": ["number", "null"]},
        "lengthscale_range": _pair,
        "scale_range": _pair,
        "nugget_range": _pair,
        "form": {"enum": list(KERNEL_FORMS)},
    },
}

DESIGNER_PROPERTIES = {
    "initial_size": _pos_int,
    "budget": _pos_int,
    "candidate_count": _pos_int,
    "batch_size": _pos_int,
    "acquisition": ACQUISITION_SCHEMA,
    "refit_schedule": {"enum": list(REFIT_SCHEDULES)},
    "noise_mode": {"enum": list(NOISE_MODES)},
    "stop_cost": {"type": "number", "minimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "initial_design": {"enum": list(INITIAL_DESIGNS)},
    "lattice_shape": {"type": "array", "items": _pos_int, "minItems": 1},
    "trace_every": {"type": "integer", "minimum": 0},
    "fit": FIT_SCHEMA,
}

KERNEL_SCHEMA = {
    "oneOf": [
        {"const": "fit"},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["scale"],
            "properties": {
                "scale": {"type": "number", "exclusiveMinimum": 0},
                "lengthscales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "theta": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "trend": _num,
                "form": {"enum": list(KERNEL_FORMS)},
            },
            "oneOf": [{"required": ["lengthscales"]}, {"required": ["theta"]}],
        },
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "designer"],
    "properties": {
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"enum": list(PROBLEMS)}, "params": {"type": "object"}},
        },
        "designer": {
            "type": "object",
            "additionalProperties": False,
            "required": ["initial_size", "budget"],
            "properties": DESIGNER_PROPERTIES,
        },
        "kernels": {"type": "array", "items": KERNEL_SCHEMA, "minItems": 2},
        "methods": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "acquisition"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "acquisition": ACQUISITION_SCHEMA,
                    "designer": {"type": "object", "additionalProperties": False, "properties": DESIGNER_PROPERTIES},
                    "kernels": {"type": "array", "items": KERNEL_SCHEMA, "minItems": 2},
                },
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_points_per_axis": {"type": "array", "items": _pos_int, "minItems": 1},
                "weights_file": {"type": "string"},
            },
        },
        "replication": {
            "type": "object",
            "additionalProperties": False,
            "required": ["count"],
            "properties": {"count": _pos_int, "base_seed": {"type": "integer", "minimum": 0}},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}},
                "save_runs": {"type": "boolean"},
            },
        },
    },
}


class ConfigError(ValueError):
    def __init__(self, source: str, line: int, path: str, message: str):
        self.source, self.line, self.path = source, line, path
        where = f"{path}: " if path else ""
        super().__init__(f"{source}:{line}: {where}{message}")


def locate(text: str, path) -> int:
    """Best-effort 1-based line of the JSON entry at ``path`` (keys and list indices)."""
    pos = 0
    for part in path:
        if isinstance(part, str):
            m = re.compile(r'"' + re.escape(part) + r'"\s*:').search(text, pos)
            if m is None:
                break
            pos = m.start()
        else:
            pos = _nth_item(text, pos, int(part))
    return text.count("\n", 0, pos) + 1


def _nth_item(text: str, pos: int, n: int) -> int:
    """Position of the ``n``-th element of the first array starting at or after ``pos``."""
    i = text.find("[", pos)
    if i < 0:
        return pos
    depth, idx, in_str = 0, 0, False
    i += 1
    while i < len(text):
        c = text[i]
        if in_str:
            if c == "\\":
                i += 1
            elif c == '"':
                in_str = False
        elif idx == n and depth == 0 and not c.isspace():
            return i
        elif c == '"':
            in_str = True
        elif c in "[{":
            depth += 1
        elif c in "]}":
            if depth == 0:
                break
            depth -= 1
        elif c == "," and depth == 0:
            idx += 1
        i += 1
    return pos


@dataclass
class LoadedConfig:
    raw: dict
    text: str
    source: str

    def error(self, path, message: str) -> ConfigError:
        path = list(path)
        return ConfigError(self.source, locate(self.text, path), ".".join(str(p) for p in path), message)


def load(path: str | Path) -> LoadedConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), 0, "", f"cannot read config: {exc.strerror}") from exc
    return loads(text, str(path))


def loads(text: str, source: str = "<config>") -> LoadedConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(source, exc.lineno, "", f"invalid JSON: {exc.msg} (column {exc.colno})") from exc
    cfg = LoadedConfig(raw, text, source)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        e = _most_specific(errors[0])
        path = list(e.absolute_path)
        if e.validator == "additionalProperties":
            path.append(_unknown_keys(e)[0])  # anchor on the offending key
        raise cfg.error(path, _schema_message(e))
    return cfg


def _most_specific(e: jsonschema.ValidationError) -> jsonschema.ValidationError:
    """Deepest sub-error of a ``oneOf``/``anyOf`` failure, preferring informative validators."""
    if not e.context:
        return e
    leaves = [_most_specific(c) for c in e.context]
    return max(leaves, key=lambda c: (len(c.absolute_path), c.validator not in ("const", "type")))


def _unknown_keys(e: jsonschema.ValidationError) -> list[str]:
    return sorted(set(e.instance) - set(e.schema.get("properties", {})))


def _schema_message(e: jsonschema.ValidationError) -> str:
    if e.validator == "additionalProperties":
        return f"unknown key(s) {_unknown_keys(e)}"
    if e.validator == "required":
        return e.message.replace("is a required property", "is required")
    return e.message


# -- construction --------------------------------------------------------------


def build_problem(cfg: LoadedConfig) -> Problem:
    block = cfg.raw["problem"]
    try:
        return make_problem(block["name"], block.get("params"))
    except (TypeError, ValueError) as exc:
        raise cfg.error(["problem", "params"] if "params" in block else ["problem"], str(exc)) from exc


def build_kernels(cfg: LoadedConfig, problem: Problem, entries, where) -> list[KernelSpec | None]:
    if entries is None:
        raise cfg.error(where[:-1] or ["kernels"], "a kernels block is required (one entry per surface, or \"fit\")")
    if len(entries) != problem.L:
        raise cfg.error(where, f"problem {problem.name!r} has {problem.L} surfaces, got {len(entries)} kernels")
    out = []
    for j, k in enumerate(entries):
        if k == "fit":
            out.append(None)
            continue
        try:
            if "lengthscales" in k:
                ks = KernelSpec.from_lengthscales(k["scale"], k["lengthscales"], k.get("trend", 0.0),
                                                  k.get("form", "printed"))
            else:
                ks = KernelSpec(k["scale"], tuple(k["theta"]), k.get("trend", 0.0), k.get("form", "printed"))
        except ValueError as exc:
            raise cfg.error(list(where) + [j], str(exc)) from exc
        if ks.input_dim != problem.dim:
            raise cfg.error(list(where) + [j], f"kernel has {ks.input_dim} dimensions, problem has {problem.dim}")
        out.append(ks)
    return out


def build_acquisition(cfg: LoadedConfig, block: dict, where) -> AcquisitionSpec:
    block = dict(block)
    for key in ("ucb_scale", "allocation"):
        if isinstance(block.get(key), list):
            block[key] = tuple(block[key])
    try:
        return AcquisitionSpec(**block)
    except ValueError as exc:
        raise cfg.error(where, str(exc)) from exc


def build_designer(cfg: LoadedConfig, block: dict, acquisition: AcquisitionSpec, where, seed=None) -> DesignerConfig:
    block = dict(block)
    block.pop("acquisition", None)
    fit = block.pop("fit", None)
    if fit is not None:
        fit = {k: tuple(v) if isinstance(v, list) else v for k, v in fit.items()}
        block["fit"] = FitSettings(**fit)
    if "lattice_shape" in block:
        block["lattice_shape"] = tuple(block["lattice_shape"])
    if seed is not None:
        block["seed"] = seed
    try:
        return DesignerConfig(acquisition=acquisition, **block)
    except ValueError as exc:
        raise cfg.error(where, str(exc)) from exc


@dataclass
class RunSpec:
    """Everything one run needs; picklable for worker processes."""

    name: str
    problem_block: dict
    designer: DesignerConfig
    kernels: list
    grid: Any
    weights: Any


def check_compatible(cfg: LoadedConfig, problem: Problem, dc: DesignerConfig, kernels, where):
    spec = dc.acquisition
    if spec.needs_truth and not problem.has_truth:
        raise cfg.error(where, f"{spec.method} needs true surfaces; problem {problem.name!r} has none")
    if dc.noise_mode == "known" and not problem.has_known_noise:
        raise cfg.error(where, f"problem {problem.name!r} has no known noise; set noise_mode to batch_estimated")
    if spec.allocation is not None and len(spec.allocation) != problem.L:
        raise cfg.error(where, f"allocation needs {problem.L} weights")
    if isinstance(spec.ucb_scale, tuple) and len(spec.ucb_scale) not in (1, problem.L):
        raise cfg.error(where, f"ucb_scale needs 1 or {problem.L} values")
    if dc.lattice_shape is not None and len(dc.lattice_shape) != problem.dim:
        raise cfg.error(where, f"lattice_shape needs {problem.dim} entries")
    if any(k is None for k in kernels) and spec.method != "lhs":
        need = min_fit_size(problem.dim)
        per = dc.initial_size // problem.L
        if dc.initial_design == "lattice" and dc.lattice_shape:
            per = int(np.prod(dc.lattice_shape))
        if per < need:
            raise cfg.error(where, f"fitted kernels need {need} initial points per surface, initial design gives {per}")


def metrics_grid(cfg: LoadedConfig, problem: Problem):
    from .problems import uniform_grid

    block = cfg.raw.get("metrics", {})
    grid = problem.grid
    if "grid_points_per_axis" in block:
        ppa = block["grid_points_per_axis"]
        if len(ppa) != problem.dim:
            raise cfg.error(["metrics", "grid_points_per_axis"], f"needs {problem.dim} entries")
        grid = uniform_grid(problem.lower, problem.upper, ppa)
        if problem.discrete:
            grid = np.unique(np.rint(grid), axis=0)
    weights = None
    if "weights_file" in block:
        wpath = Path(block["weights_file"])
        if not wpath.is_absolute():
            wpath = Path(cfg.source).parent / wpath
        try:
            w = np.loadtxt(wpath, dtype=float, ndmin=1)
        except (OSError, ValueError) as exc:
            raise cfg.error(["metrics", "weights_file"], f"cannot read weights: {exc}") from exc
        if w.shape != (grid.shape[0],) or np.any(w < 0) or w.sum() <= 0:
            raise cfg.error(["metrics", "weights_file"],
                            f"need {grid.shape[0]} nonnegative weights with positive sum")
        weights = w / w.sum()
    return grid, weights


def run_specs(cfg: LoadedConfig, seed: int | None = None, bench: bool = False) -> tuple[Problem, list[tuple[str, list[RunSpec]]]]:
    """Resolve the config into per-method lists of runs (one per replicate)."""
    raw = cfg.raw
    problem = build_problem(cfg)
    grid, weights = metrics_grid(cfg, problem)
    if bench:
        if "methods" not in raw:
            raise cfg.error([], "bench needs a methods block")
        if "replication" not in raw:
            raise cfg.error([], "bench needs a replication block")
        rep = raw["replication"]
        base = rep.get("base_seed", 0) if seed is None else seed
        count = rep["count"]
        entries = [(m["name"], m, ["methods", j]) for j, m in enumerate(raw["methods"])]
        names = [e[0] for e in entries]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise cfg.error(["methods"], f"duplicate method names {sorted(dup)}")
    else:
        if "acquisition" not in raw["designer"]:
            raise cfg.error(["designer"], "designer.acquisition is required")
        base = raw["designer"].get("seed", 0) if seed is None else seed
        count = 1
        entries = [(raw["designer"]["acquisition"]["method"], {"acquisition": raw["designer"]["acquisition"]}, ["designer"])]
    out = []
    for name, entry, where in entries:
        acq_where = list(where) + ["acquisition"]
        acq = build_acquisition(cfg, entry["acquisition"], acq_where)
        dblock = {**raw["designer"], **entry.get("designer", {})}
        dc = build_designer(cfg, dblock, acq, where if bench else ["designer"], seed=base)
        kwhere = list(where) + ["kernels"] if "kernels" in entry else ["kernels"]
        kernels = build_kernels(cfg, problem, entry.get("kernels", raw.get("kernels")), kwhere)
        check_compatible(cfg, problem, dc, kernels, where)
        runs = []
        for i in range(count):
            d_i = replace(dc, seed=base + i)
            runs.append(RunSpec(name, raw["problem"], d_i, kernels, grid, weights))
        out.append((name, runs))
    return problem, out
