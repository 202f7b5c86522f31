from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .geodesic_trig import SURFACES, Surface
from .manifolds import ModelManifold, VectorFieldSpec, vector_field

COMMANDS = ("indices", "supertrace", "kernel-checks", "levi", "triangle")
SEED_LIMIT = 2**64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HHConfig:
    data_dir: Path
    log_dir: Path
    db_path: Path

    @property
    def log_file(self) -> Path:
        return self.log_dir / "hopf_heat.log"


def load_config() -> HHConfig:
    cwd = Path.cwd()
    default_data = cwd / "data"
    default_logs = cwd / "logs"

    data_dir = Path(os.getenv(
        "HOPF_HEAT_DATA_DIR",
        str(default_data if default_data.exists() else Path.home() / ".hopf-heat" / "data")
    )).expanduser()

    log_dir = Path(os.getenv(
        "HOPF_HEAT_LOG_DIR",
        str(default_logs if default_logs.exists() else Path.home() / ".hopf-heat" / "logs")
    )).expanduser()

    data_dir.mkdir(parents=True, exist_ok=True)
    log_dir.mkdir(parents=True, exist_ok=True)
    return HHConfig(data_dir=data_dir, log_dir=log_dir, db_path=data_dir / "hopf_heat.db")


DEFAULTS: dict[str, dict[str, Any]] = {
    "indices": {
        "manifold": {"kind": "sphere", "dim": 2, "grid": [64, 128]},
        "field": "sphere-height",
        "s": [0.1, 0.01],
        "expected_chi": None,
        "tolerances": {"index_limit": 0.05},
    },
    "supertrace": {
        "manifold": {"kind": "sphere", "dim": 2, "grid": [64, 128]},
        "field": "sphere-height",
        "kernel": {"s": [0.5, 0.25, 0.1], "kappa": [0.4, 0.2, 0.08, 0.04], "tau": None,
                   "literal_tau": [0.1, 0.05, 0.02, 0.01]},
        "decay_s": 0.5,
        "expected_chi": None,
        "mckean_singer": {
            "cases": [{"dim": 2, "N": 12, "field": "torus-sin"}, {"dim": 1, "N": 64, "field": "circle-sin"}],
            "tau": [0.1, 0.5],
            "t": [0.0, 1.0, 4.0],
        },
        "tolerances": {"chi": 0.05, "mckean_singer": 1e-8},
    },
    "kernel-checks": {
        "samples": {"exterior": 200, "leading_order": 100, "residual_order": 50, "phi0_forms": 1000,
                    "gaussian_bounds": 10000, "localized": 50, "intertwine": 50, "b_zero": 100},
        "s_leading": [1e-2, 1e-3, 1e-4],
        "s_localized": [1e-1, 1e-2, 1e-3],
        "tolerances": {"phi0_forms": 1e-10, "b_zero": 1e-13, "residual_order_ratio": 0.25, "intertwine": 1e-10,
                       "leading_order": 1.0, "localized_factor": 1.0},
    },
    "levi": {
        "manifold": {"kind": "torus", "dim": 1, "grid": [64]},
        "field": "circle-sin",
        "t": 1.0,
        "tau": 0.25,
        "steps": 64,
        "refine": 8,
        "terms": None,
        "theta_check": True,
        "convolution_bound": {"c1": 1.0, "c2": 2.0, "eps": 0.3, "samples": 50, "nodes": 64},
        "tolerances": {"levi_vs_exact": 1e-3, "fit": 0.3, "theta_series": 1e-6, "supertrace": 1e-2,
                       "heat_residual": 1e-2},
    },
    "triangle": {
        "surfaces": ["plane", "unit-sphere", "bump"],
        "bump": {"amplitude": 0.3, "width": 1.0},
        "eps": 0.3,
        "samples": {"law": 100, "jacobi": 20, "identities": 3, "side_derivative": 100, "second_derivative": 1000,
                    "comparison": 10000, "comparison_bump": 20},
        "tolerances": {"plane": 1e-10, "sphere": 1e-8, "identity": 1e-5, "identity_closed_form": 1e-9,
                       "side_derivative": 1e-6, "jacobi": 1e-8},
    },
}


def _merge(base: dict[str, Any], over: Mapping[str, Any], where: str = "") -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(val, Mapping):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _positive_list(values: Any, key: str) -> list[float]:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{key} must be a nonempty list")
    try:
        out = [float(v) for v in values]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key} must hold numbers: {e}") from e
    if any(not v > 0.0 for v in out):
        raise ConfigError(f"{key} must be positive, got {values}")
    return out


def _count(value: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ConfigError(f"{key} must be a positive integer, got {value!r}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    seed: int
    params: dict[str, Any] = field(default_factory=dict)

    def resolved(self) -> dict[str, Any]:
        return {"command": self.command, "seed": self.seed, **copy.deepcopy(self.params)}

    def tolerance(self, name: str) -> float:
        return float(self.params["tolerances"][name])

    def samples(self, name: str) -> int:
        return int(self.params["samples"][name])

    def manifold(self) -> ModelManifold:
        m = self.params["manifold"]
        try:
            return ModelManifold(str(m["kind"]), int(m["dim"]), tuple(m["grid"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad manifold spec {m!r}: {e}") from e

    def field_spec(self, spec: Any = None, manifold: ModelManifold | None = None) -> VectorFieldSpec:
        spec = self.params["field"] if spec is None else spec
        try:
            return vector_field(spec, manifold or self.manifold())
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def surface(self, kind: str) -> Surface:
        if kind not in SURFACES:
            raise ConfigError(f"unknown surface preset: {kind!r}")
        bump = self.params.get("bump", {})
        return Surface(kind, float(bump.get("amplitude", 0.3)), float(bump.get("width", 1.0)))


def _validate(exp: ExperimentConfig) -> None:
    p = exp.params
    if "manifold" in p:
        exp.field_spec()
    if "samples" in p:
        for key, val in p["samples"].items():
            _count(val, f"samples.{key}")
    cmd = exp.command
    if cmd == "indices":
        _positive_list(p["s"], "s")
    elif cmd == "supertrace":
        kernel = p["kernel"]
        _positive_list(kernel["s"], "kernel.s")
        _positive_list(kernel["kappa"], "kernel.kappa")
        if kernel["tau"] is not None:
            _positive_list(kernel["tau"], "kernel.tau")
        if kernel["literal_tau"] is not None:
            _positive_list(kernel["literal_tau"], "kernel.literal_tau")
        ms = p["mckean_singer"]
        _positive_list(ms["tau"], "mckean_singer.tau")
        if any(float(t) < 0.0 for t in ms["t"]):
            raise ConfigError("mckean_singer.t must be >= 0")
        for case in ms["cases"]:
            m = ModelManifold.torus(int(case["dim"]), int(case["N"]))
            exp.field_spec(case["field"], m)
    elif cmd == "kernel-checks":
        _positive_list(p["s_leading"], "s_leading")
        _positive_list(p["s_localized"], "s_localized")
    elif cmd == "levi":
        _positive_list([p["tau"]], "tau")
        if exp.manifold().kind != "torus":
            raise ConfigError("levi runs on a flat torus")
        _count(p["steps"], "steps")
        _count(p["refine"], "refine")
        if p["terms"] is not None:
            _count(p["terms"], "terms")
        _count(p["convolution_bound"]["samples"], "convolution_bound.samples")
    elif cmd == "triangle":
        for kind in p["surfaces"]:
            exp.surface(kind)
        _positive_list([p["eps"]], "eps")


def load_experiment(path: str | Path | None, command: str, seed: int | None = None) -> ExperimentConfig:
    """Defaults for command, overlaid by the JSON document at path, then by seed."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    doc = dict(doc)
    declared = doc.pop("command", command)
    if declared != command:
        raise ConfigError(f"config is for command {declared!r}, not {command!r}")
    doc_seed = doc.pop("seed", 0)
    seed = doc_seed if seed is None else seed
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < SEED_LIMIT:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    samples = doc.get("samples")
    if isinstance(samples, int) and "samples" in DEFAULTS[command]:
        doc["samples"] = {k: samples for k in DEFAULTS[command]["samples"]}
    exp = ExperimentConfig(command, seed, _merge(DEFAULTS[command], doc))
    try:
        _validate(exp)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid {command} config: {e}") from e
    return exp
