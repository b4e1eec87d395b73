"""Experiment configuration: TOML schema, validation, object builders.

Configs are strict: unknown keys anywhere are rejected with their full
path, required keys are reported by path, and physics checks (scale
regime, drift centering) are surfaced as warnings by :func:`validate_config`
before any heavy computation runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .action import EndpointEvent, HalfSpaceEvent
from .medium import (
    CoefficientSpec,
    FieldTerm,
    MediumSample,
    build_coefficients,
    sample_medium,
)

EXPERIMENTS = ("homogenize", "rate", "estimate", "ergodic", "occupation", "full-pipeline")

_TERM_KEYS = {"amplitude", "wavevector", "kind", "phase", "x_weight", "component"}

_SCHEMA = {
    "environment": {
        "family": str,
        "fast_dim": int,
        "seed": int,
        "d_const": (int, float),
        "randomize": str,
        "wavevectors": list,
        "potential": list,
    },
    "coefficients": {
        "slow_dim": int,
        "k1": int,
        "k2": int,
        "b": list,
        "c": list,
        "sigma": list,
        "f": list,
        "g": list,
        "tau1": list,
        "tau2": list,
    },
    "scales": {
        "eps": list,
        "delta_exponent": (int, float),
        "c_step": (int, float),
    },
    "experiment": {
        "kind": str,
        "T": (int, float),
        "x0": list,
        "y0": list,
        "seed": int,
        "replicas": int,
        "mode": str,
        "n_seg": int,
        "threads": int,
    },
    "event": {
        "type": str,
        "normal": list,
        "level": (int, float),
        "target": list,
    },
    "corrector": {
        "n_grid": int,
        "rho_schedule": list,
        "method": str,
        "solver_tol": (int, float),
        "use_extrapolated": bool,
        "rho": (int, float),
        "mc_paths": int,
        "mc_t_trunc": (int, float),
    },
    "effective": {
        "x_min": list,
        "x_max": list,
        "x_nodes": int,
    },
    "ergodic": {
        "observable": list,
        "shifts": list,
        "mode": str,
        "replicas": int,
        "beta": (int, float),
        "media": int,
    },
    "occupation": {
        "n_t": int,
        "n_u": int,
        "n_y": int,
        "delta": (int, float),
        "replicas": int,
    },
}

_REQUIRED = {
    "environment": ("family", "fast_dim"),
    "coefficients": ("slow_dim", "k1"),
    "scales": ("eps",),
    "experiment": ("kind", "T", "seed"),
}


class SchemaError(ValueError):
    """Structural config problem; the message names the offending path."""


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"config parse error in {path}: {exc}")


def _check_term(t, path, errors, *, needs_component):
    if not isinstance(t, dict):
        errors.append(f"{path}: expected a table")
        return
    for k in t:
        if k not in _TERM_KEYS:
            errors.append(f"{path}.{k}: unknown key")
    if "amplitude" not in t:
        errors.append(f"{path}.amplitude: missing required key")
    if needs_component and "component" not in t:
        errors.append(f"{path}.component: missing required key")
    if "kind" in t and t["kind"] not in ("cos", "sin"):
        errors.append(f"{path}.kind: must be 'cos' or 'sin'")


def validate_structure(cfg: dict) -> list[str]:
    """Schema errors: unknown keys, missing required keys, wrong types."""
    errors: list[str] = []
    if not isinstance(cfg, dict):
        return ["config root must be a table"]
    for section, content in cfg.items():
        if section not in _SCHEMA:
            errors.append(f"{section}: unknown section")
            continue
        if not isinstance(content, dict):
            errors.append(f"{section}: expected a table")
            continue
        schema = _SCHEMA[section]
        for key, value in content.items():
            if key not in schema:
                errors.append(f"{section}.{key}: unknown key")
                continue
            expected = schema[key]
            if expected is list:
                if not isinstance(value, list):
                    errors.append(f"{section}.{key}: expected an array")
            elif not isinstance(value, expected) or isinstance(value, bool) != (expected is bool):
                name = expected.__name__ if isinstance(expected, type) else "number"
                errors.append(f"{section}.{key}: expected {name}")
    for section, keys in _REQUIRED.items():
        if section not in cfg:
            errors.append(f"{section}: missing required section")
            continue
        for key in keys:
            if key not in cfg[section]:
                errors.append(f"{section}.{key}: missing required key")
    if errors:
        return errors

    env = cfg["environment"]
    if env["family"] not in ("random_shift_periodic", "random_phase_fourier", "gradient"):
        errors.append("environment.family: unknown family")
    for i, t in enumerate(env.get("potential", [])):
        _check_term(t, f"environment.potential[{i}]", errors, needs_component=False)
    for name in ("b", "c", "sigma", "f", "g", "tau1", "tau2"):
        for i, t in enumerate(cfg["coefficients"].get(name, [])):
            _check_term(t, f"coefficients.{name}[{i}]", errors, needs_component=True)
    exp = cfg["experiment"]
    if exp["kind"] not in EXPERIMENTS:
        errors.append(f"experiment.kind: must be one of {EXPERIMENTS}")
    if exp["kind"] in ("rate", "estimate", "full-pipeline") and "event" not in cfg:
        errors.append("event: missing required section for this experiment")
    if "event" in cfg:
        ev = cfg["event"]
        if ev.get("type") not in ("half_space", "endpoint"):
            errors.append("event.type: must be 'half_space' or 'endpoint'")
        elif ev["type"] == "half_space" and "normal" not in ev:
            errors.append("event.normal: missing required key")
        elif ev["type"] == "endpoint" and "target" not in ev:
            errors.append("event.target: missing required key")
    if "mode" in exp and exp["mode"] not in ("plain", "is"):
        errors.append("experiment.mode: must be 'plain' or 'is'")
    if "method" in cfg.get("corrector", {}) and cfg["corrector"]["method"] not in ("grid", "mc"):
        errors.append("corrector.method: must be 'grid' or 'mc'")
    return errors


def validate_config(cfg: dict) -> tuple[list[str], list[str]]:
    """Full report: (schema errors, physics warnings)."""
    errors = validate_structure(cfg)
    warnings: list[str] = []
    if errors:
        return errors, warnings
    a = cfg.get("scales", {}).get("delta_exponent", 1.5)
    if a <= 1:
        warnings.append(
            f"scales.delta_exponent = {a}: regime eps/delta -> infinity violated"
        )
    eps = cfg["scales"]["eps"]
    if any(e <= 0 for e in eps):
        errors.append("scales.eps: entries must be positive")
    try:
        setup = build_setup(cfg)
    except Exception as exc:  # structural errors already caught; report build issues
        errors.append(f"build: {exc}")
        return errors, warnings
    offset = setup.coeffs.b_offset
    if offset is not None and np.any(np.abs(offset) > 1e-8):
        warnings.append(
            "coefficients.b: pi-mean "
            f"{np.array2string(offset, precision=3)} subtracted at build time"
        )
    slow_floor, fast_floor = setup.coeffs.noise_floor(setup.x0)
    if slow_floor < 1e-12:
        warnings.append(
            f"coefficients.sigma: slow noise degenerate on the grid "
            f"(min eigenvalue {slow_floor:.2e})"
        )
    if fast_floor < 1e-12:
        warnings.append(
            f"coefficients.tau1/tau2: fast noise degenerate on the grid "
            f"(min eigenvalue {fast_floor:.2e})"
        )
    return errors, warnings


def _parse_term(t: dict) -> tuple[tuple[int, ...] | None, FieldTerm]:
    comp = tuple(int(i) for i in t["component"]) if "component" in t else None
    return comp, FieldTerm(
        amplitude=float(t["amplitude"]),
        wavevector=tuple(t["wavevector"]) if "wavevector" in t else None,
        kind=t.get("kind", "cos"),
        phase=float(t.get("phase", 0.0)),
        x_weight=tuple(t["x_weight"]) if "x_weight" in t else None,
    )


@dataclass
class RunSetup:
    """Objects built from a validated config (single realization)."""

    config: dict
    sample: MediumSample
    coeffs: object
    eps_list: list[float]
    delta_exponent: float
    c_step: float
    T: float
    x0: np.ndarray
    y0: np.ndarray
    seed: int
    replicas: int
    event: object | None = None
    extras: dict = dc_field(default_factory=dict)

    def medium_for_seed(self, seed: int):
        """Fresh realization of the same environment for another seed."""
        sample = _build_sample(self.config, seed)
        coeffs = _build_coeffs(self.config, sample)
        return sample, coeffs


def _build_sample(cfg: dict, seed_override: int | None = None) -> MediumSample:
    env = cfg["environment"]
    co = cfg["coefficients"]
    seed = seed_override if seed_override is not None else env.get(
        "seed", cfg["experiment"]["seed"]
    )
    potential = tuple(_parse_term(t)[1] for t in env.get("potential", []))
    return sample_medium(
        env["family"],
        fast_dim=int(env["fast_dim"]),
        slow_dim=int(co["slow_dim"]),
        seed=int(seed),
        d_const=env.get("d_const"),
        potential=potential,
        wavevectors=tuple(tuple(w) for w in env.get("wavevectors", [])),
        randomize=env.get("randomize", "shift"),
    )


def _build_coeffs(cfg: dict, sample: MediumSample):
    co = cfg["coefficients"]
    spec = CoefficientSpec(
        slow_dim=int(co["slow_dim"]),
        fast_dim=sample.fast_dim,
        k1=int(co["k1"]),
        k2=int(co.get("k2", 0)),
    )
    for name in ("b", "c", "sigma", "f", "g", "tau1", "tau2"):
        for t in co.get(name, []):
            comp, term = _parse_term(t)
            spec.add(name, comp, term)
    return build_coefficients(sample, spec)


def build_event(cfg: dict):
    if "event" not in cfg:
        return None
    ev = cfg["event"]
    if ev["type"] == "half_space":
        return HalfSpaceEvent(np.asarray(ev["normal"], float), float(ev.get("level", 0.0)))
    return EndpointEvent(np.asarray(ev["target"], float))


def build_setup(cfg: dict) -> RunSetup:
    errors = validate_structure(cfg)
    if errors:
        raise SchemaError("; ".join(errors))
    sample = _build_sample(cfg)
    coeffs = _build_coeffs(cfg, sample)
    sc = cfg["scales"]
    exp = cfg["experiment"]
    m = coeffs.slow_dim
    df = coeffs.fast_dim
    return RunSetup(
        config=cfg,
        sample=sample,
        coeffs=coeffs,
        eps_list=[float(e) for e in sc["eps"]],
        delta_exponent=float(sc.get("delta_exponent", 1.5)),
        c_step=float(sc.get("c_step", 0.1)),
        T=float(exp["T"]),
        x0=np.asarray(exp.get("x0", [0.0] * m), float),
        y0=np.asarray(exp.get("y0", [0.0] * df), float),
        seed=int(exp["seed"]),
        replicas=int(exp.get("replicas", 1000)),
        event=build_event(cfg),
        extras={
            "mode": exp.get("mode", "is"),
            "n_seg": int(exp.get("n_seg", 32)),
            "threads": exp.get("threads"),
            "corrector": dict(cfg.get("corrector", {})),
            "effective": dict(cfg.get("effective", {})),
            "ergodic": dict(cfg.get("ergodic", {})),
            "occupation": dict(cfg.get("occupation", {})),
        },
    )
