"""Experiment configuration: a flat JSON object validated before any work starts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

EXPERIMENTS = ("diag-corr", "orbit-trace", "scalar-demo", "sharpness-single")
_U64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    output_dir: str | None = None
    jobs: int = 1

    # diagonal regression data and training
    d: int = 200
    n: int = 100
    sparsity: float = 0.9
    noise: float = 0.0
    test_factor: int = 10
    n_models: int = 50
    lr_range: list = field(default_factory=lambda: [0.1, 1.0])
    init_scale: float | None = None
    init_scale_range: list = field(default_factory=lambda: [0.01, 1.0])
    tol: float = 1e-5
    max_iters: int = 200_000
    min_converged: int = 10

    # sharpness
    rho: float = 0.1
    metric: str = "inv"
    geodesic: str = "second_order"
    horizontal: bool = True
    n_iter: int = 200
    restarts: int = 8
    epsilon: float = 0.0
    n_batches: int = 1

    # matrix net and trace estimation
    N: int = 128
    D_in: int = 64
    D_out: int = 10
    h: int = 2
    weight_scale: float = 1.0
    alpha_grid: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0, 10.0])
    curve_alphas: list = field(default_factory=lambda: [0.1, 10.0])
    spectrum_alphas: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    budget: int = 100
    k: int = 20
    idx_images: str | None = None
    idx_labels: str | None = None

    # scalar demo and single-model sharpness
    model: str = "diagonal"
    grid_min: float = -2.0
    grid_max: float = 2.0
    grid_size: int = 41
    x: list = field(default_factory=lambda: [1.0])
    y: list = field(default_factory=lambda: [0.0])
    theta: list = field(default_factory=lambda: [1.0, 0.5])

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def resolved_init_scale(self):
        return 1.0 / math.sqrt(self.d) if self.init_scale is None else self.init_scale


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_NULLABLE = {"output_dir", "init_scale", "idx_images", "idx_labels"}
_POSITIVE_INT = {"d", "n", "test_factor", "n_models", "max_iters", "restarts", "n_batches", "N",
                 "D_in", "D_out", "h", "budget", "grid_size", "jobs"}
_NONNEG_INT = {"n_iter", "k", "min_converged"}
_POSITIVE = {"tol", "rho", "weight_scale", "init_scale"}


def _type_name(f):
    return str(f.type).replace(" | None", "")


def _check_type(key, value):
    kind = _type_name(_FIELDS[key])
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {type(value).__name__}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {type(value).__name__}")
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {type(value).__name__}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {type(value).__name__}")
        return value
    if kind == "list":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key}: expected a non-empty list")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"{key}: list entries must be finite numbers")
            out.append(float(v))
        return out
    raise ConfigError(f"{key}: unsupported field type")  # pragma: no cover


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown experiment {cfg.experiment!r}")
    if not 0 <= cfg.seed <= _U64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    for key in _POSITIVE_INT:
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key}: must be at least 1")
    for key in _NONNEG_INT:
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be non-negative")
    for key in _POSITIVE:
        v = getattr(cfg, key)
        if v is not None and not v > 0:
            raise ConfigError(f"{key}: must be positive")
    if not 0 <= cfg.sparsity < 1:
        raise ConfigError("sparsity: must lie in [0, 1)")
    if cfg.noise < 0 or cfg.epsilon < 0:
        raise ConfigError("noise and epsilon must be non-negative")
    for key in ("lr_range", "init_scale_range"):
        lo_hi = getattr(cfg, key)
        if len(lo_hi) != 2 or not 0 < lo_hi[0] <= lo_hi[1]:
            raise ConfigError(f"{key}: expected [low, high] with 0 < low ≤ high")
    if cfg.metric not in ("euclidean", "inv", "mix"):
        raise ConfigError(f"metric: unknown metric {cfg.metric!r}")
    if cfg.geodesic not in ("exact", "second_order", "linear"):
        raise ConfigError(f"geodesic: unknown mode {cfg.geodesic!r}")
    if cfg.model not in ("diagonal", "scalar", "matrix"):
        raise ConfigError(f"model: unknown model {cfg.model!r}")
    for key in ("alpha_grid", "curve_alphas", "spectrum_alphas"):
        if any(a == 0 for a in getattr(cfg, key)):
            raise ConfigError(f"{key}: alpha values must be nonzero")
    if cfg.budget < 2 * cfg.k + 1:
        raise ConfigError("budget: must be at least 2k + 1")
    if cfg.experiment == "orbit-trace" and cfg.k > cfg.h * (cfg.D_in + cfg.D_out):
        raise ConfigError("k: exceeds the parameter count")
    if cfg.grid_min >= cfg.grid_max:
        raise ConfigError("grid_min: must be below grid_max")
    if len(cfg.x) != len(cfg.y):
        raise ConfigError("x: must have the same length as y")
    if (cfg.idx_images is None) != (cfg.idx_labels is None):
        raise ConfigError("idx_images: image and label files must be given together")
    if len(cfg.theta) != 2 or 0.0 in cfg.theta:
        raise ConfigError("theta: expected two nonzero values [theta1, theta2]")
    if cfg.experiment == "sharpness-single" and cfg.model == "matrix" and cfg.geodesic == "exact":
        raise ConfigError("geodesic: exact geodesics are unavailable for the matrix model")
    return cfg


def from_dict(obj) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(obj) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    if "experiment" not in obj:
        raise ConfigError("experiment: missing required field")
    kwargs = {k: _check_type(k, v) for k, v in obj.items()}
    return validate(ExperimentConfig(**kwargs))


def parse_config(text) -> ExperimentConfig:
    """Parse and validate a JSON config, filling defaults."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"config: not valid UTF-8 ({exc})") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    return from_dict(obj)
