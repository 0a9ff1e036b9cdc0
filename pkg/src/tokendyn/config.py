"""Experiment configuration: strict JSON schema, defaults and hashing.

A configuration is a JSON object

.. code-block:: json

    {"schema_version": 1, "experiment": "deep_rate", "master_seed": 0,
     "trials": 64, "record_stride": 1, "n_tokens": 8,
     "model": {...}, "grids": {...}}

Missing keys take the experiment's defaults; unknown keys are an error at
every nesting level.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionParams
from .dynamics import ModelConfig
from .errors import ConfigError
from .kernel import ACTIVATIONS, KernelSpec

SCHEMA_VERSION = 1

EXPERIMENTS = ("kernel_table", "simulate", "deep_rate", "wide_rate", "chaos", "sync", "lyapunov")

_MODEL_BASE = {
    "depth": 64,
    "horizon": 1.0,
    "scheme": "euler_ambient",
    "width": None,
    "ito_correction": True,
    "dim": 4,
    "kernel": {"activation": "relu", "sigma_u": 0.1, "sigma_w": 0.1},
    "attention": {"beta": 1.0, "scale": 1.0, "q": None, "k": None, "v": None},
}


def _model(**changes):
    m = copy.deepcopy(_MODEL_BASE)
    for key, value in changes.items():
        if isinstance(value, dict):
            m[key].update(value)
        else:
            m[key] = value
    return m


_DEFAULTS = {
    "kernel_table": {
        "trials": 1,
        "n_tokens": 1,
        "model": _model(),
        "grids": {
            "activations": ["relu", "sigmoid", "tanh", "silu"],
            "dims": [5, 64, 128],
            "sigmas": [0.0, 0.1],
            "beta": 1.0,
        },
    },
    "simulate": {
        "trials": 8,
        "n_tokens": 64,
        "record_stride": 100,
        "model": _model(
            depth=2000,
            horizon=20.0,
            scheme="transformer_discrete",
            width=2048,
            kernel={"sigma_u": 0.0, "sigma_w": 0.0},
            attention={"scale": 0.0},
        ),
        "grids": {"beta": 1.0},
    },
    "deep_rate": {
        "trials": 64,
        "n_tokens": 8,
        "model": _model(depth=64, horizon=1.0, scheme="euler_ambient"),
        "grids": {"depths": [64, 128, 256, 512]},
    },
    "wide_rate": {
        "trials": 32,
        "n_tokens": 8,
        "model": _model(depth=1024, horizon=1.0, scheme="euler_ambient"),
        "grids": {"widths": [64, 256, 1024, 4096], "static_points": 8, "trajectory": True},
    },
    "chaos": {
        "trials": 32,
        "n_tokens": 512,
        "record_stride": 4,
        "model": _model(depth=32, horizon=1.0, scheme="euler_projected", dim=3),
        "grids": {"sizes": [16, 32, 64, 128]},
    },
    "sync": {
        "trials": 256,
        "n_tokens": 64,
        "record_stride": 16,
        "model": _model(depth=1024, horizon=4.0, scheme="euler_projected", dim=64, attention={"scale": 0.0}),
        "grids": {"beta": 1.0, "scales": [0.0], "fit_window": None},
    },
    "lyapunov": {
        "trials": 200,
        "n_tokens": 2,
        "model": _model(depth=4096, horizon=8.0, scheme="pure_noise", dim=64),
        "grids": {
            "kernels": [{"activation": "relu", "sigma_u": 0.1, "sigma_w": 0.1, "dim": 64}],
            "initial_gap": 1e-3,
            "renorm_every": 8,
        },
    },
}

_TOP_DEFAULTS = {"schema_version": SCHEMA_VERSION, "master_seed": 0, "record_stride": 1, "output_path": None}

# keys whose default is None but which accept a value
_NULLABLE = {"width": (int,), "q": (list,), "k": (list,), "v": (list,), "fit_window": (list,),
             "output_path": (str,)}

_KERNEL_ITEM = {"activation": "relu", "sigma_u": 0.0, "sigma_w": 0.0, "dim": 4}


def default_config(experiment: str) -> dict:
    """Fully resolved default configuration for ``experiment``."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    cfg = dict(copy.deepcopy(_TOP_DEFAULTS))
    cfg["experiment"] = experiment
    cfg.update(copy.deepcopy(_DEFAULTS[experiment]))
    return cfg


def _type_ok(value, default, key) -> bool:
    if default is None:
        return value is None or isinstance(value, _NULLABLE.get(key, ()))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(base: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(default, value, where)
            continue
        if not _type_ok(value, default, key):
            raise ConfigError(f"{where!r} has the wrong type: {value!r}")
        if isinstance(default, float) and not isinstance(value, bool):
            value = float(value)
        out[key] = value
    return out


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` and fill in defaults.

    Raises
    ------
    ConfigError
        On unknown keys, wrong types, bad versions or invalid values.
    """
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"'experiment' must be one of {EXPERIMENTS}, got {experiment!r}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    cfg = _merge(default_config(experiment), raw, "")
    if experiment == "lyapunov":
        cfg["grids"]["kernels"] = [
            _merge(_KERNEL_ITEM, k, f"grids.kernels[{i}]") if isinstance(k, dict) else _bad_kernel(i)
            for i, k in enumerate(cfg["grids"]["kernels"])
        ]
    _validate(cfg)
    return cfg


def _bad_kernel(i):
    raise ConfigError(f"grids.kernels[{i}] must be an object")


def _positive_list(values, name, integer=True):
    if not values:
        raise ConfigError(f"{name} must be a non-empty list")
    for v in values:
        ok = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok or v <= 0:
            raise ConfigError(f"{name} must contain positive {'integers' if integer else 'numbers'}")


def _validate(cfg: dict) -> None:
    if cfg["trials"] < 1:
        raise ConfigError("trials must be >= 1")
    if cfg["record_stride"] < 1:
        raise ConfigError("record_stride must be >= 1")
    if not 0 <= cfg["master_seed"] < 2**64:
        raise ConfigError("master_seed must be an unsigned 64-bit integer")
    if cfg["n_tokens"] < 1:
        raise ConfigError("n_tokens must be >= 1")
    model = cfg["model"]
    if model["depth"] < 1 or model["horizon"] <= 0 or model["dim"] < 2:
        raise ConfigError("model needs depth >= 1, horizon > 0 and dim >= 2")
    if model["kernel"]["activation"] not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {model['kernel']['activation']!r}")
    g = cfg["grids"]
    exp = cfg["experiment"]
    if exp == "kernel_table":
        for a in g["activations"]:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        _positive_list(g["dims"], "grids.dims")
        if any(s < 0 for s in g["sigmas"]):
            raise ConfigError("grids.sigmas must be nonnegative")
    elif exp == "deep_rate":
        _positive_list(g["depths"], "grids.depths")
        d = g["depths"]
        if len(d) < 3 or any(b != 2 * a for a, b in zip(d, d[1:])):
            raise ConfigError("grids.depths must be at least three consecutive doublings")
        if len(d) > 6:
            raise ConfigError("at most six refinement levels are supported")
    elif exp == "wide_rate":
        _positive_list(g["widths"], "grids.widths")
        w = g["widths"]
        ratios = {b / a for a, b in zip(w, w[1:])}
        if len(w) < 3 or len(ratios) != 1 or ratios.pop() <= 1:
            raise ConfigError("grids.widths must be an increasing geometric sequence of length >= 3")
        if g["static_points"] < 1:
            raise ConfigError("grids.static_points must be >= 1")
    elif exp == "chaos":
        _positive_list(g["sizes"], "grids.sizes")
        n_ref = cfg["n_tokens"]
        if any(n_ref % n for n in g["sizes"]):
            raise ConfigError("every size in grids.sizes must divide n_tokens")
        if n_ref + sum(g["sizes"]) > 8192:
            raise ConfigError("the union of all chaos systems exceeds 8192 points")
        if len(g["sizes"]) < 3:
            raise ConfigError("chaos needs at least three sizes")
    elif exp == "sync":
        if g["beta"] <= 0:
            raise ConfigError("grids.beta must be positive")
        if g["fit_window"] is not None and len(g["fit_window"]) != 2:
            raise ConfigError("grids.fit_window must be [t0, t1] or null")
    elif exp == "lyapunov":
        if not 1e-6 <= g["initial_gap"] <= 1e-3:
            raise ConfigError("grids.initial_gap must lie in [1e-6, 1e-3]")
        if g["renorm_every"] < 1:
            raise ConfigError("grids.renorm_every must be >= 1")
        for k in g["kernels"]:
            if k["activation"] not in ACTIVATIONS or k["dim"] < 2:
                raise ConfigError(f"invalid kernel entry {k!r}")
    try:
        model_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> dict:
    """Read and resolve a JSON configuration file."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return resolve_config(raw)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of the configuration without its output path."""
    body = {k: v for k, v in cfg.items() if k != "output_path"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


# --------------------------------------------------------------------- builders


def kernel_spec(cfg: dict, dim: int | None = None) -> KernelSpec:
    model = cfg["model"]
    k = model["kernel"]
    return KernelSpec(k["activation"], k["sigma_u"], k["sigma_w"], dim or model["dim"])


def attention_params(cfg: dict, scale: float | None = None) -> AttentionParams:
    model = cfg["model"]
    a = model["attention"]
    d = model["dim"]
    s = a["scale"] if scale is None else scale
    if a["q"] is None and a["k"] is None and a["v"] is None:
        return AttentionParams.isotropic(d, a["beta"], scale=s)
    eye = np.eye(d).tolist()
    q = a["q"] if a["q"] is not None else eye
    k = a["k"] if a["k"] is not None else eye
    v = a["v"] if a["v"] is not None else eye
    return AttentionParams(np.array(q, dtype=float), np.array(k, dtype=float), np.array(v, dtype=float), s)


def model_config(cfg: dict, **changes) -> ModelConfig:
    model = cfg["model"]
    base = dict(
        depth=model["depth"],
        horizon=model["horizon"],
        attention=attention_params(cfg),
        kernel=kernel_spec(cfg),
        width=model["width"],
        scheme=model["scheme"],
        ito_correction=model["ito_correction"],
    )
    base.update(changes)
    return ModelConfig(**base)


@dataclass(frozen=True)
class ExperimentConfig:
    """Typed view of a resolved configuration dictionary."""

    raw: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return cls(resolve_config(raw))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc

    def to_json(self) -> str:
        return canonical_json(self.raw)

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    @property
    def trials(self) -> int:
        return self.raw["trials"]

    @property
    def master_seed(self) -> int:
        return self.raw["master_seed"]

    @property
    def record_stride(self) -> int:
        return self.raw["record_stride"]

    @property
    def grids(self) -> dict:
        return self.raw["grids"]

    @property
    def output_path(self):
        return self.raw["output_path"]

    @property
    def model(self) -> ModelConfig:
        return model_config(self.raw)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)
