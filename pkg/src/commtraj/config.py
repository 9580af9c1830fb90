"""Scenario files: YAML schema, loading with validation, and dumping.

Field names carry their units (``mass_kg``, ``q_min_megabytes``). Unknown
keys are rejected and every omitted optional field is materialized, so the
effective configuration can be written back and reloaded unchanged. The
schema itself is documented in ``docs/file_formats.md``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .channel import ChannelParams, megabytes_to_bits
from .dynamics import QuadrotorParams, hover_state
from .problem import InvalidScenarioError, Obstacle, Scenario
from .scp import ScpConfig


class ConfigError(ValueError):
    """Invalid scenario file; the message names the offending field."""


# kinds: "num", "pos" (> 0), "nonneg", "int" (>= 1), "count" (>= 0), "vec2", "vec3", "str", "num?" (nullable)
_REQUIRED = object()

SCHEMA: dict = {
    "name": ("str", "scenario"),
    "mission": {
        "start_position_m": ("vec3", _REQUIRED),
        "goal_position_m": ("vec3", _REQUIRED),
        "q_min_megabytes": ("nonneg", 0.0),
        "nodes": ("int", 100),
        "T_guess_s": ("pos", 400.0),
        "T_min_s": ("pos", 10.0),
        "T_max_s": ("pos", 2000.0),
        "z_min_m": ("num?", None),
        "gs_standoff_m": ("pos?", None),
        "constraint_substeps": ("int", 10),
        "obstacles": ("obstacles", []),
    },
    "quadrotor": {
        "mass_kg": ("pos", 3.0),
        "inertia_kg_m2": ("vec3", [0.04, 0.04, 0.08]),
        "arm_length_m": ("pos", 0.3),
        "gravity_m_s2": ("pos", 9.80665),
        "phi_max_deg": ("pos", 35.0),
        "theta_max_deg": ("pos", 35.0),
        "thrust_max_n": ("pos?", None),
        "torque_max_n_m": ("vec3", [1.0, 1.0, 1.0]),
    },
    "channel": {
        "a1": ("pos", 10.0),
        "a2": ("pos", 0.6),
        "zeta": ("pos", 0.2),
        "beta": ("pos", 2.3),
        "b": ("pos", 60.0),
        "bandwidth_hz": ("pos", 1.0e6),
        "gs_position_m": ("vec3", [200.0, 400.0, 0.0]),
        "tx_power_w": ("pos", 5.0),
    },
    "solver": {
        "lambda": ("pos", 1.0e3),
        "eps": ("pos", 1.0e-4),
        "iter_max": ("int", 50),
        "rho0": ("pos", 0.01),
        "rho1": ("pos", 0.25),
        "rho2": ("pos", 0.7),
        "alpha": ("pos", 2.0),
        "trust_init": ("pos", 1.0),
        "trust_min": ("pos", 1.0e-4),
        "trust_max": ("pos", 64.0),
        "feas_tol": ("pos", 1.0e-6),
        "max_rejections": ("int", 10),
        "correction_steps": ("count", 1),
    },
}

OBSTACLE_SCHEMA = {"center_m": ("vec2", _REQUIRED), "safe_radius_m": ("pos", _REQUIRED)}


@dataclass
class LoadedScenario:
    scenario: Scenario
    config: ScpConfig
    document: dict  # effective configuration, defaults materialized


def _key_lines(text: str) -> dict:
    """Map dotted key paths to 1-based line numbers."""
    out: dict = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                path = f"{prefix}[{i}]"
                out[path] = v.start_mark.line + 1
                walk(v, path)

    try:
        walk(yaml.compose(text, Loader=yaml.SafeLoader), "")
    except yaml.YAMLError:
        pass
    return out


def _where(path: str, lines: dict) -> str:
    return f"{path} (line {lines[path]})" if path in lines else path


def _number(value, path, lines):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{_where(path, lines)}: expected a number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError(f"{_where(path, lines)}: must be finite")
    return value


def _check(kind: str, value, path: str, lines: dict):
    if kind.endswith("?"):
        if value is None:
            return None
        kind = kind[:-1]
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{_where(path, lines)}: expected a string")
        return value
    if kind in ("int", "count"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{_where(path, lines)}: expected an integer, got {value!r}")
        low = 1 if kind == "int" else 0
        if value < low:
            raise ConfigError(f"{_where(path, lines)}: must be at least {low}")
        return value
    if kind in ("vec2", "vec3"):
        n = int(kind[-1])
        if not isinstance(value, list) or len(value) != n:
            raise ConfigError(f"{_where(path, lines)}: expected a list of {n} numbers")
        return [_number(v, f"{path}[{i}]", lines) for i, v in enumerate(value)]
    if kind == "obstacles":
        if not isinstance(value, list):
            raise ConfigError(f"{_where(path, lines)}: expected a list of obstacles")
        return [_section(OBSTACLE_SCHEMA, item, f"{path}[{i}]", lines) for i, item in enumerate(value)]
    v = _number(value, path, lines)
    if kind == "pos" and not v > 0:
        raise ConfigError(f"{_where(path, lines)}: must be positive, got {v:g}")
    if kind == "nonneg" and v < 0:
        raise ConfigError(f"{_where(path, lines)}: must be nonnegative, got {v:g}")
    return v


def _section(schema: dict, data, prefix: str, lines: dict) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{_where(prefix, lines) if prefix else 'document'}: expected a mapping")
    unknown = sorted(set(data) - set(schema), key=str)
    if unknown:
        p = f"{prefix}.{unknown[0]}" if prefix else str(unknown[0])
        raise ConfigError(f"{_where(p, lines)}: unknown key")
    out = {}
    for key, spec in schema.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(spec, dict):
            out[key] = _section(spec, data.get(key), path, lines)
            continue
        kind, default = spec
        if key not in data:
            if default is _REQUIRED:
                raise ConfigError(f"{path}: required field missing")
            out[key] = copy.deepcopy(default)
        else:
            out[key] = _check(kind, data[key], path, lines)
    return out


def build(doc: dict, lines: dict | None = None) -> LoadedScenario:
    """Construct validated objects from an effective document."""
    lines = lines or {}
    doc = _section(SCHEMA, doc, "", lines)
    q, m, c, s = doc["quadrotor"], doc["mission"], doc["channel"], doc["solver"]

    def attempt(fn, field_hint):
        try:
            return fn()
        except (ValueError, InvalidScenarioError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{field_hint}: {exc}") from None

    quad = attempt(lambda: QuadrotorParams(
        mass=q["mass_kg"], inertia=tuple(q["inertia_kg_m2"]), arm_length=q["arm_length_m"],
        g=q["gravity_m_s2"], phi_max=float(np.deg2rad(q["phi_max_deg"])),
        theta_max=float(np.deg2rad(q["theta_max_deg"])), u1_max=q["thrust_max_n"],
        torque_max=tuple(q["torque_max_n_m"])), "quadrotor")
    chan = attempt(lambda: ChannelParams(
        a1=c["a1"], a2=c["a2"], zeta=c["zeta"], beta=c["beta"], b=c["b"], bandwidth=c["bandwidth_hz"],
        gs_position=tuple(c["gs_position_m"]), tx_power=c["tx_power_w"]), "channel")
    obstacles = [attempt(lambda o=o: Obstacle(tuple(o["center_m"]), o["safe_radius_m"]),
                         f"mission.obstacles[{i}]") for i, o in enumerate(m["obstacles"])]
    sc = attempt(lambda: Scenario(
        x_start=hover_state(m["start_position_m"]), x_goal=hover_state(m["goal_position_m"]),
        quad=quad, channel=chan, obstacles=obstacles, q_min=megabytes_to_bits(m["q_min_megabytes"]),
        N=m["nodes"], T_guess=m["T_guess_s"], T_min=m["T_min_s"], T_max=m["T_max_s"],
        z_min=m["z_min_m"], gs_standoff=m["gs_standoff_m"], substeps=m["constraint_substeps"],
        name=doc["name"]), "mission")
    cfg = attempt(lambda: ScpConfig(
        lam=s["lambda"], eps=s["eps"], iter_max=s["iter_max"], rho0=s["rho0"], rho1=s["rho1"],
        rho2=s["rho2"], alpha=s["alpha"], trust_init=s["trust_init"], trust_min=s["trust_min"],
        trust_max=s["trust_max"], feas_tol=s["feas_tol"], max_rejections=s["max_rejections"],
        correction_steps=s["correction_steps"]), "solver")
    return LoadedScenario(sc, cfg, doc)


def loads(text: str) -> LoadedScenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"YAML parse error{where}: {getattr(exc, 'problem', exc)}") from None
    return build(data if data is not None else {}, _key_lines(text))


def bundled_scenarios() -> list[str]:
    root = resources.files("commtraj") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve(path_or_name) -> Path | resources.abc.Traversable:
    p = Path(path_or_name)
    if p.exists():
        return p
    name = str(path_or_name)
    if name in bundled_scenarios():
        return resources.files("commtraj") / "scenarios" / f"{name}.yaml"
    raise ConfigError(f"no such scenario file or bundled scenario: {name}")


def load_scenario(path_or_name) -> LoadedScenario:
    """Load a scenario file (or bundled scenario name) with full validation."""
    src = resolve(path_or_name)
    try:
        text = src.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {src}: {exc}") from None
    return loads(text)


def with_overrides(loaded: LoadedScenario, **overrides) -> LoadedScenario:
    """Re-build with ``section.key`` overrides, e.g. ``{"solver.iter_max": 200}``."""
    doc = copy.deepcopy(loaded.document)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{dotted}: unknown key")
        doc[section][key] = value
    return build(doc)


def dumps(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
