"""Config-file schema: parsing, validation, and defaults.

Configs are TOML with sections [problem], [network], [smoothing],
[training], [evaluation], [ablation], [study], [bench], [run]. Every
validation error names the offending key as ``section.key`` so the CLI
can report schema violations precisely.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .estimators import SmoothingConfig
from .network import NetworkSpec, mlp_spec
from .problems import ProblemSpec, make_problem
from .training import AdversarialConfig, TrainConfig

SCHEMA_VERSION = 1

_SECTIONS = (
    "problem",
    "network",
    "smoothing",
    "training",
    "evaluation",
    "ablation",
    "study",
    "bench",
    "run",
)


def _get(cfg, section, key, kind, default=..., positive=False, nonneg=False):
    table = cfg.get(section, {})
    if key not in table:
        if default is ...:
            raise ConfigError(f"{section}.{key}: missing required key")
        return default
    val = table[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is int and isinstance(val, float) and float(val).is_integer():
        val = int(val)
    if not isinstance(val, kind) or isinstance(val, bool):
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {val!r}")
    if positive and val <= 0:
        raise ConfigError(f"{section}.{key}: must be positive, got {val!r}")
    if nonneg and val < 0:
        raise ConfigError(f"{section}.{key}: must be nonnegative, got {val!r}")
    return val


def _get_list(cfg, section, key, default):
    table = cfg.get(section, {})
    if key not in table:
        return list(default)
    val = table[key]
    if not isinstance(val, list) or not val:
        raise ConfigError(f"{section}.{key}: expected a nonempty list")
    return val


@dataclass
class StudySettings:
    dim: int = 100
    width: int = 64
    layers: int = 4
    sigma: float = 0.1
    num_points: int = 16
    k_grid: tuple = tuple(2**i for i in range(3, 16))
    oracle_samples: int = 200_000
    oracle_var_target: float = 1e-7


@dataclass
class BenchSettings:
    dims: tuple = (10, 100, 1000)
    width: int = 64
    samples: int = 512
    num_points: int = 64
    replicates: int = 5
    threads: Optional[int] = 1


@dataclass
class AblationSettings:
    sigma_grid: tuple = (1.0, 1e-1, 1e-2, 1e-3)
    samples_grid: tuple = (256, 512, 1024, 2048)


@dataclass
class RunSettings:
    """Everything a CLI command needs, resolved and validated."""

    problem: ProblemSpec
    network: NetworkSpec
    smoothing: SmoothingConfig
    training: TrainConfig
    study: StudySettings
    bench: BenchSettings
    ablation: AblationSettings
    seed: int
    threads: int  # 0: machine default
    raw: dict


def load_config_file(path) -> dict:
    """Read a TOML config, or recover the config dict from a manifest JSON."""
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        try:
            manifest = json.loads(text.decode())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if "config" not in manifest:
            raise ConfigError(f"{path}: manifest has no 'config' snapshot")
        return manifest["config"]
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def build_settings(cfg: dict, seed_override=None, threads_override=None) -> RunSettings:
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a table")
    unknown = [s for s in cfg if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; expected {list(_SECTIONS)}")

    name = _get(cfg, "problem", "name", str)
    dim = _get(cfg, "problem", "dim", int, default=2 if name == "poisson2d" else None)
    if dim is None:
        raise ConfigError("problem.dim: missing required key")
    horizon = _get(cfg, "problem", "horizon", float, default=1.0, positive=True)
    mu = _get(cfg, "problem", "mu", float, default=1.0)

    batch_interior = _get(cfg, "training", "batch_interior", int, positive=True)
    batch_boundary = _get(cfg, "training", "batch_boundary", int, positive=True)
    weight_boundary = _get(cfg, "training", "weight_boundary", float, positive=True)
    kwargs = {}
    if name == "poisson2d":
        kwargs = dict(
            boundary_weight=weight_boundary,
            interior_batch=batch_interior,
            boundary_batch=batch_boundary,
        )
    elif name == "heat":
        kwargs = dict(
            dim=dim,
            horizon=horizon,
            initial_weight=_get(cfg, "training", "weight_initial", float, positive=True),
            boundary_weight=weight_boundary,
            interior_batch=batch_interior,
            initial_batch=_get(cfg, "training", "batch_initial", int, positive=True),
            boundary_batch=batch_boundary,
        )
    elif name == "hjb":
        kwargs = dict(
            dim=dim,
            horizon=horizon,
            mu=mu,
            terminal_weight=weight_boundary,
            interior_batch=batch_interior,
            terminal_batch=batch_boundary,
        )
    else:
        raise ConfigError(f"problem.name: unknown problem {name!r}")
    problem = make_problem(name, **kwargs)

    layers = _get(cfg, "network", "layers", int, positive=True)
    hidden = _get(cfg, "network", "hidden_dim", int, positive=True)
    activation = _get(cfg, "network", "activation", str, default="tanh")
    if activation != "tanh":
        raise ConfigError(f"network.activation: only 'tanh' is supported, got {activation!r}")
    out_act = _get(cfg, "network", "output_activation", str, default="identity")
    if out_act not in ("identity", "tanh"):
        raise ConfigError(f"network.output_activation: expected identity|tanh, got {out_act!r}")
    net = mlp_spec(problem.input_dim, layers=layers, hidden_dim=hidden, output_activation=out_act)

    seed = _get(cfg, "run", "seed", int, default=0)
    if seed_override is not None:
        seed = int(seed_override)
    threads = _get(cfg, "run", "threads", int, default=0, nonneg=True)
    if threads_override is not None:
        threads = int(threads_override)

    try:
        smoothing = SmoothingConfig(
            sigma=_get(cfg, "smoothing", "sigma", float),
            samples=_get(cfg, "smoothing", "samples", int),
            variant=_get(cfg, "smoothing", "variant", str, default="cv_antithetic"),
            seed=seed,
        )
    except ConfigError as exc:
        raise ConfigError(f"smoothing: {exc}") from exc

    adv = None
    inner = _get(cfg, "training", "adversarial_inner_iterations", int, default=0, nonneg=True)
    if inner > 0:
        adv_samples = _get(cfg, "training", "adversarial_samples", int, default=0, nonneg=True)
        adv = AdversarialConfig(
            inner_iterations=inner,
            step_size=_get(cfg, "training", "adversarial_step_size", float, positive=True),
            gradient=_get(cfg, "training", "adversarial_gradient", str, default="exact"),
            samples=adv_samples or None,
        )

    eval_points = _get(cfg, "evaluation", "points", int, default=None, nonneg=True)
    eval_samples = _get(cfg, "evaluation", "samples", int, default=0, nonneg=True) or None
    ref_samples = _get(cfg, "evaluation", "reference_samples", int, default=0, nonneg=True) or None

    try:
        train_cfg = TrainConfig(
            iterations=_get(cfg, "training", "iterations", int),
            learning_rate=_get(cfg, "training", "learning_rate", float, nonneg=True),
            smoothing=smoothing,
            lr_schedule=_get(cfg, "training", "lr_schedule", str, default="linear_to_zero"),
            adam_beta1=_get(cfg, "training", "adam_beta1", float, default=0.9),
            adam_beta2=_get(cfg, "training", "adam_beta2", float, default=0.999),
            adam_epsilon=_get(cfg, "training", "adam_epsilon", float, default=1e-8),
            adversarial=adv,
            seed=seed,
            eval_points=eval_points,
            eval_samples=eval_samples,
            reference_samples=ref_samples,
            checkpoint_every=_get(cfg, "training", "checkpoint_every", int, default=100, positive=True),
        )
    except ConfigError as exc:
        raise ConfigError(f"training: {exc}") from exc

    study = StudySettings(
        dim=_get(cfg, "study", "dim", int, default=100, positive=True),
        width=_get(cfg, "study", "width", int, default=64, positive=True),
        layers=_get(cfg, "study", "layers", int, default=4, positive=True),
        sigma=_get(cfg, "study", "sigma", float, default=0.1, positive=True),
        num_points=_get(cfg, "study", "num_points", int, default=16, positive=True),
        k_grid=tuple(int(k) for k in _get_list(cfg, "study", "k_grid", StudySettings.k_grid)),
        oracle_samples=_get(cfg, "study", "oracle_samples", int, default=200_000, positive=True),
        oracle_var_target=_get(cfg, "study", "oracle_var_target", float, default=1e-7, positive=True),
    )
    bench = BenchSettings(
        dims=tuple(int(d) for d in _get_list(cfg, "bench", "dims", BenchSettings.dims)),
        width=_get(cfg, "bench", "width", int, default=64, positive=True),
        samples=_get(cfg, "bench", "samples", int, default=512, positive=True),
        num_points=_get(cfg, "bench", "num_points", int, default=64, positive=True),
        replicates=_get(cfg, "bench", "replicates", int, default=5, positive=True),
        threads=_get(cfg, "bench", "threads", int, default=1, nonneg=True) or None,
    )
    if bench.replicates < 5:
        raise ConfigError(f"bench.replicates: need at least 5, got {bench.replicates}")
    ablation = AblationSettings(
        sigma_grid=tuple(float(s) for s in _get_list(cfg, "ablation", "sigma_grid", AblationSettings.sigma_grid)),
        samples_grid=tuple(int(k) for k in _get_list(cfg, "ablation", "samples_grid", AblationSettings.samples_grid)),
    )

    resolved = json.loads(json.dumps(cfg))  # deep copy, JSON-typed
    resolved.setdefault("run", {})["seed"] = seed
    resolved["run"]["threads"] = threads
    return RunSettings(
        problem=problem,
        network=net,
        smoothing=smoothing,
        training=train_cfg,
        study=study,
        bench=bench,
        ablation=ablation,
        seed=seed,
        threads=threads,
        raw=resolved,
    )


def config_hash(cfg: dict) -> str:
    """Content hash of the resolved config (stable key order)."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
