"""Run configuration: sectioned key = value files, validated with full error lists.

The format is a flat INI-like text file with sections [grid], [curve],
[weight], [flow], [analysis], [galerkin]. Every key has a default, unknown
keys and sections are rejected, and parsing reports all problems at once
(line numbers included for duplicates) rather than stopping at the first.
Environment variables SINGFLOW_<SECTION>__<KEY> override file values.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field


class ConfigError(Exception):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class RunConfig:
    # [grid]
    n: int = 32
    length: float = 1.0
    # [curve]
    curve_kind: str = "axis_line"
    curve_a: float = 0.5
    curve_b: float = 0.5
    circle_center: tuple[float, float, float] = (0.5, 0.5, 0.5)
    circle_radius: float = 0.25
    circle_normal_axis: int = 2
    circle_samples: int = 256
    # [weight]
    alpha: float = 1.5
    solver_tol: float = 1e-10
    exclusion_radius: float = 0.15
    # [flow]
    family: str = "zero"
    family_c: float = 1.0
    family_a: float = 0.0
    family_b: float = 0.0
    scheme: str = "imex"
    dt_policy: str = "fixed"
    dt: float = 1e-4
    cfl_factor: float = 0.25
    t_final: float = 1.0
    snapshot_interval: float = 0.25
    # [analysis]
    seed: int = 20240808
    holder_pairs: int = 100000
    fit_window_start: float = 1.0
    fit_window_end: float = 5.0
    rate_slack: float = 0.8
    r2_min: float = 0.9
    shell_lo: float = 0.125
    shell_hi: float = 0.25
    # [galerkin]
    galerkin_N: int = 8
    galerkin_dt: float = 1e-3
    galerkin_t_final: float = 0.3
    galerkin_forcing: str = "trig_damped"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["circle_center"] = list(d["circle_center"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


# (section, key) -> (attribute, converter)
_SCHEMA: dict[tuple[str, str], tuple[str, str]] = {
    ("grid", "n"): ("n", "int"),
    ("grid", "length"): ("length", "float"),
    ("curve", "kind"): ("curve_kind", "str"),
    ("curve", "a"): ("curve_a", "float"),
    ("curve", "b"): ("curve_b", "float"),
    ("curve", "center"): ("circle_center", "vec3"),
    ("curve", "radius"): ("circle_radius", "float"),
    ("curve", "normal_axis"): ("circle_normal_axis", "int"),
    ("curve", "samples"): ("circle_samples", "int"),
    ("weight", "alpha"): ("alpha", "float"),
    ("weight", "solver_tol"): ("solver_tol", "float"),
    ("weight", "exclusion_radius"): ("exclusion_radius", "float"),
    ("flow", "family"): ("family", "str"),
    ("flow", "c"): ("family_c", "float"),
    ("flow", "a"): ("family_a", "float"),
    ("flow", "b"): ("family_b", "float"),
    ("flow", "scheme"): ("scheme", "str"),
    ("flow", "dt_policy"): ("dt_policy", "str"),
    ("flow", "dt"): ("dt", "float"),
    ("flow", "cfl_factor"): ("cfl_factor", "float"),
    ("flow", "t_final"): ("t_final", "float"),
    ("flow", "snapshot_interval"): ("snapshot_interval", "float"),
    ("analysis", "seed"): ("seed", "int"),
    ("analysis", "holder_pairs"): ("holder_pairs", "int"),
    ("analysis", "fit_window_start"): ("fit_window_start", "float"),
    ("analysis", "fit_window_end"): ("fit_window_end", "float"),
    ("analysis", "rate_slack"): ("rate_slack", "float"),
    ("analysis", "r2_min"): ("r2_min", "float"),
    ("analysis", "shell_lo"): ("shell_lo", "float"),
    ("analysis", "shell_hi"): ("shell_hi", "float"),
    ("galerkin", "N"): ("galerkin_N", "int"),
    ("galerkin", "dt"): ("galerkin_dt", "float"),
    ("galerkin", "t_final"): ("galerkin_t_final", "float"),
    ("galerkin", "forcing"): ("galerkin_forcing", "str"),
}

_SECTIONS = ("grid", "curve", "weight", "flow", "analysis", "galerkin")


def _convert(raw: str, kind: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "vec3":
        parts = [float(p) for p in raw.split(",")]
        if len(parts) != 3:
            raise ValueError("expected three comma-separated components")
        return tuple(parts)
    return raw


def _validate(cfg: RunConfig, errors: list[str]):
    if cfg.alpha <= 1.0:
        errors.append(f"[weight] alpha = {cfg.alpha}: alpha must exceed 1 (weight regime alpha > 1)")
    if cfg.n <= 0:
        errors.append(f"[grid] n = {cfg.n}: must be a positive integer")
    if cfg.length <= 0:
        errors.append(f"[grid] length = {cfg.length}: must be positive")
    if cfg.curve_kind not in ("axis_line", "circle"):
        errors.append(f"[curve] kind = {cfg.curve_kind!r}: must be axis_line or circle")
    if cfg.curve_kind == "circle" and not (0 < cfg.circle_radius < cfg.length / 2):
        errors.append(
            f"[curve] radius = {cfg.circle_radius}: must lie in (0, length/2) under periodicity"
        )
    if cfg.family not in ("zero", "poly_cutoff", "trig", "poly_cutoff+trig"):
        errors.append(f"[flow] family = {cfg.family!r}: unknown initial-data family")
    if cfg.scheme != "imex":
        errors.append(f"[flow] scheme = {cfg.scheme!r}: only imex is implemented")
    if cfg.dt_policy not in ("fixed", "cfl"):
        errors.append(f"[flow] dt_policy = {cfg.dt_policy!r}: must be fixed or cfl")
    for name in ("dt", "t_final", "snapshot_interval", "cfl_factor", "solver_tol"):
        if getattr(cfg, name) <= 0:
            errors.append(f"[flow] {name} = {getattr(cfg, name)}: must be positive")
    if cfg.galerkin_N < 1:
        errors.append(f"[galerkin] N = {cfg.galerkin_N}: must be at least 1")
    if cfg.galerkin_dt <= 0 or cfg.galerkin_t_final <= 0:
        errors.append("[galerkin] dt and t_final must be positive")
    if cfg.holder_pairs < 1:
        errors.append(f"[analysis] holder_pairs = {cfg.holder_pairs}: must be positive")
    if not (0 < cfg.rate_slack <= 1):
        errors.append(f"[analysis] rate_slack = {cfg.rate_slack}: must lie in (0, 1]")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    errors: list[str] = []
    seen: dict[tuple[str, str], int] = {}
    values: dict[str, object] = {}

    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                errors.append(f"{source}:{lineno}: unknown section [{section}]")
                section = None
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        if section is None:
            errors.append(f"{source}:{lineno}: key outside of any known section")
            continue
        key, raw_val = (part.strip() for part in line.split("=", 1))
        entry = _SCHEMA.get((section, key))
        if entry is None:
            errors.append(f"{source}:{lineno}: unknown key {key!r} in section [{section}]")
            continue
        if (section, key) in seen:
            errors.append(
                f"{source}:{lineno}: duplicate key {key!r} in [{section}] "
                f"(first defined on line {seen[(section, key)]})"
            )
            continue
        seen[(section, key)] = lineno
        attr, kind = entry
        try:
            values[attr] = _convert(raw_val, kind)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: cannot parse {key} = {raw_val!r} ({exc})")

    cfg = RunConfig(**values) if not errors else RunConfig(**{k: v for k, v in values.items()})
    _apply_env_overrides(cfg, errors)
    _validate(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def _apply_env_overrides(cfg: RunConfig, errors: list[str]):
    for (section, key), (attr, kind) in _SCHEMA.items():
        env_name = f"SINGFLOW_{section.upper()}__{key.upper()}"
        if env_name in os.environ:
            try:
                setattr(cfg, attr, _convert(os.environ[env_name], kind))
            except ValueError as exc:
                errors.append(f"environment {env_name}: cannot parse ({exc})")
    if "SINGFLOW_SEED" in os.environ:
        try:
            cfg.seed = int(os.environ["SINGFLOW_SEED"])
        except ValueError:
            errors.append("environment SINGFLOW_SEED: expected an integer")


def parse_config(path: str) -> RunConfig:
    """Parse and validate a config file; raises ConfigError listing all problems."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return parse_config_text(text, source=path)


def build_problem(cfg: RunConfig):
    """Instantiate (grid, curve, distance field, weight) from a config."""
    from singflow.geometry import CurveGamma, TorusGrid, distance_to_curve
    from singflow.weight import build_weight

    grid = TorusGrid(cfg.n, cfg.length)
    if cfg.curve_kind == "axis_line":
        gamma = CurveGamma.axis_line(cfg.curve_a, cfg.curve_b)
    else:
        gamma = CurveGamma.circle(
            cfg.circle_center, cfg.circle_radius, cfg.circle_normal_axis, cfg.circle_samples
        )
    rho = distance_to_curve(grid, gamma)
    w = build_weight(rho, alpha=cfg.alpha, tol=cfg.solver_tol)
    return grid, gamma, rho, w
