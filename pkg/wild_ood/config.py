"""
Config Module for Wild OOD
Loads and validates JSON experiment configs and turns them into the
settings objects used by training and evaluation.
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from wild_ood.alm import AlmState, ConstraintSpec
from wild_ood.baselines import DEFAULT_ENERGY_MARGINS, BaselineConfig
from wild_ood.exceptions import ConfigurationError
from wild_ood.logger import get_logger
from wild_ood.nnet import ACTIVATIONS, DEFAULT_ENERGY_SLOPE, DEFAULT_HEAD_WIDTH
from wild_ood.training import LR_SCHEDULES, TrainConfig

logger = get_logger("config")

OUTPUT_DIR_ENV = "WILD_OOD_OUTPUT_DIR"

METHODS = ("woods", "woods_nn", "ce_only", "oe", "energy_reg")
GENERATORS = ("gaussian", "moons_ring", "csv")
TAU_MODES = ("warmup", "fixed")

DEFAULT_SCORERS = {
    "woods": "energy_sigmoid",
    "woods_nn": "nn_head",
    "ce_only": "energy",
    "oe": "msp",
    "energy_reg": "energy",
}

DEFAULT_LAMBDA_REG = {"oe": 0.5, "energy_reg": 0.1}

DEFAULT_CONFIG = {
    "task": {
        "generator": None,
        "params": {},
        "id_splits": {"train": 0.6, "wild": 0.2, "val": 0.1, "test": 0.1},
        "ood_splits": {"wild": 0.6, "val": 0.2, "test": 0.2},
    },
    "mixture": {"pi": 0.5, "m": 2000, "m_val": None, "fixed": False},
    "method": {
        "name": "woods",
        "alpha": 0.05,
        "tol": 0.05,
        "tau_mode": "warmup",
        "tau": None,
        "gamma": 1.5,
        "mu2": 1.0,
        "lr": 0.001,
        "batch_size": 128,
        "steps_per_epoch": None,
        "epochs": 50,
        "warmup_epochs": 20,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "nesterov": True,
        "lr_schedule": "constant",
        "calibrate_slope": True,
        "lambda_reg": None,
        "margins": None,
        "tpr_target": 0.95,
    },
    "model": {
        "hidden_dims": [64, 64],
        "activation": "relu",
        "head": False,
        "head_width": DEFAULT_HEAD_WIDTH,
        "energy_slope_w": DEFAULT_ENERGY_SLOPE,
    },
    "seeds": {"data": 0, "init": 0, "training": 0},
    "sweep": {"pi_values": [0.05, 0.1, 0.2, 0.5, 1.0], "methods": ["woods", "ce_only"],
              "workers": 1},
    "select": {"gammas": [1.1, 1.5], "mu2s": [0.1, 1.0, 2.0], "epsilon": 0.0},
    "output_dir": "outputs",
}

# Generator parameters: (required keys, optional keys with defaults)
GENERATOR_PARAMS = {
    "gaussian": (
        ["class_means", "class_covs", "class_counts", "ood_mean", "ood_cov", "ood_count"],
        {"test_ood_mean": None, "test_ood_cov": None, "test_ood_count": 0},
    ),
    "moons_ring": (
        ["class_counts", "ood_count"],
        {"noise": 0.1, "ring_radius": 3.0},
    ),
    "csv": (
        ["id_path", "ood_path"],
        {"test_ood_path": None, "label_column": "label", "feature_columns": None},
    ),
}


def derive_seed(base: int, *keys: int) -> int:
    """
    Independent child seed for a named stream

    Args:
        base: Parent seed
        keys: Integers naming the stream (e.g. sweep cell index)

    Returns:
        Non-negative 32-bit seed
    """
    return int(np.random.SeedSequence([int(base), *[int(k) for k in keys]]).generate_state(1)[0])


def canonical_json(payload: Any) -> str:
    """Sorted-key JSON without whitespace"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _merge(defaults: Dict, overrides: Dict, path: str) -> Dict:
    """Merge overrides into a copy of defaults, rejecting unknown keys"""
    if not isinstance(overrides, dict):
        raise ConfigurationError(f"'{path or 'config'}' must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigurationError(f"unknown config key '{dotted}'")
        # 'params' is free-form here and checked per generator later
        if isinstance(defaults[key], dict) and key != "params":
            merged[key] = _merge(defaults[key], value, dotted)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _number(value, path: str, low: float = None, high: float = None,
            low_open: bool = False, high_open: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise ConfigurationError(f"'{path}' must be a finite number, got {value!r}")
    if low is not None and (value <= low if low_open else value < low):
        raise ConfigurationError(f"'{path}' must be {'>' if low_open else '>='} {low}, got {value}")
    if high is not None and (value >= high if high_open else value > high):
        raise ConfigurationError(f"'{path}' must be {'<' if high_open else '<='} {high}, got {value}")
    return value


def _integer(value, path: str, low: int = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"'{path}' must be an integer, got {value!r}")
    if low is not None and value < low:
        raise ConfigurationError(f"'{path}' must be >= {low}, got {value}")
    return value


def _choice(value, path: str, options) -> str:
    if value not in options:
        raise ConfigurationError(f"'{path}' must be one of {list(options)}, got {value!r}")
    return value


def _flag(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigurationError(f"'{path}' must be true or false, got {value!r}")
    return value


def _fractions(parts: Dict, path: str, names: List[str]):
    for name in names:
        _number(parts[name], f"{path}.{name}", 0.0, 1.0)
    if abs(sum(parts[name] for name in names) - 1.0) > 1e-9:
        raise ConfigurationError(f"'{path}' fractions must sum to 1")


@dataclass
class ExperimentConfig:
    """
    Validated experiment configuration

    Each attribute is the merged (defaults + file) section dictionary.
    """
    task: Dict
    mixture: Dict
    method: Dict
    model: Dict
    seeds: Dict
    sweep: Dict
    select: Dict
    output_dir: str

    @classmethod
    def from_dict(cls, payload: Dict) -> "ExperimentConfig":
        """
        Merge a config document with the defaults and validate it

        Args:
            payload: Parsed JSON document

        Returns:
            ExperimentConfig
        """
        merged = _merge(DEFAULT_CONFIG, payload, "")
        _validate(merged)
        return cls(**merged)

    def to_dict(self) -> Dict:
        return {
            "task": copy.deepcopy(self.task),
            "mixture": copy.deepcopy(self.mixture),
            "method": copy.deepcopy(self.method),
            "model": copy.deepcopy(self.model),
            "seeds": copy.deepcopy(self.seeds),
            "sweep": copy.deepcopy(self.sweep),
            "select": copy.deepcopy(self.select),
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        """First 12 hex characters of the SHA-256 of the canonical JSON"""
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()[:12]

    def with_changes(self, **sections) -> "ExperimentConfig":
        """
        Copy with some keys replaced, e.g. with_changes(mixture={"pi": 0.1})

        Section dictionaries are merged key by key; output_dir is replaced.
        """
        payload = self.to_dict()
        for section, value in sections.items():
            if isinstance(value, dict):
                payload[section].update(copy.deepcopy(value))
            else:
                payload[section] = value
        return ExperimentConfig.from_dict(payload)

    @property
    def method_name(self) -> str:
        return self.method["name"]

    def train_config(self, epochs: Optional[int] = None) -> TrainConfig:
        """Optimizer settings of the main training phase"""
        m = self.method
        return TrainConfig(
            epochs=m["epochs"] if epochs is None else epochs,
            batch_size=m["batch_size"],
            steps_per_epoch=m["steps_per_epoch"],
            learning_rate=float(m["lr"]),
            momentum=float(m["momentum"]),
            weight_decay=float(m["weight_decay"]),
            nesterov=m["nesterov"],
            lr_schedule=m["lr_schedule"],
            seed=self.seeds["training"],
        )

    def warmup_config(self) -> TrainConfig:
        """Optimizer settings of the CE-only warm-up (constant rate, own sampler seed)"""
        config = self.train_config(epochs=self.method["warmup_epochs"])
        config.lr_schedule = "constant"
        config.seed = derive_seed(self.seeds["training"], 1)
        return config

    def constraint_spec(self, tau: float) -> ConstraintSpec:
        return ConstraintSpec(alpha=float(self.method["alpha"]), tau=float(tau),
                              tol=float(self.method["tol"]))

    def alm_state(self, gamma: float = None, mu2: float = None) -> AlmState:
        return AlmState(gamma=float(self.method["gamma"] if gamma is None else gamma),
                        mu2=float(self.method["mu2"] if mu2 is None else mu2))

    def baseline_config(self, method: str = None) -> BaselineConfig:
        """
        BaselineConfig for a baseline method, filling in default lambda and margins
        """
        name = method or self.method_name
        if name == "ce_only":
            return BaselineConfig("ce_only")
        lambda_reg = self.method["lambda_reg"]
        if lambda_reg is None:
            lambda_reg = DEFAULT_LAMBDA_REG[name]
        margins = None
        if name == "energy_reg":
            margins = tuple(self.method["margins"] or DEFAULT_ENERGY_MARGINS)
        return BaselineConfig(name, float(lambda_reg), margins)

    def layer_dims(self, input_dim: int, n_classes: int) -> List[int]:
        return [int(input_dim)] + [int(h) for h in self.model["hidden_dims"]] + [int(n_classes)]

    def default_scorer(self, method: str = None) -> str:
        return DEFAULT_SCORERS[method or self.method_name]


def _validate_task(task: Dict):
    generator = task["generator"]
    if generator is None:
        raise ConfigurationError("'task.generator' is required")
    _choice(generator, "task.generator", GENERATORS)

    required, optional = GENERATOR_PARAMS[generator]
    params = task["params"]
    if not isinstance(params, dict):
        raise ConfigurationError("'task.params' must be an object")
    for key in params:
        if key not in required and key not in optional:
            raise ConfigurationError(f"unknown config key 'task.params.{key}' "
                                     f"for generator '{generator}'")
    for key in required:
        if key not in params:
            raise ConfigurationError(f"'task.params.{key}' is required for generator '{generator}'")
    for key, default in optional.items():
        params.setdefault(key, default)

    if generator == "moons_ring":
        _number(params["noise"], "task.params.noise", 0.0)
        _number(params["ring_radius"], "task.params.ring_radius", 0.0, low_open=True)
    if generator in ("gaussian", "moons_ring"):
        _integer(params["ood_count"], "task.params.ood_count", 1)
        for i, count in enumerate(params["class_counts"]):
            _integer(count, f"task.params.class_counts[{i}]", 1)

    _fractions(task["id_splits"], "task.id_splits", ["train", "wild", "val", "test"])
    _fractions(task["ood_splits"], "task.ood_splits", ["wild", "val", "test"])


def _validate(config: Dict):
    _validate_task(config["task"])

    mixture = config["mixture"]
    _number(mixture["pi"], "mixture.pi", 0.0, 1.0, low_open=True)
    _integer(mixture["m"], "mixture.m", 1)
    if mixture["m_val"] is not None:
        _integer(mixture["m_val"], "mixture.m_val", 1)
    _flag(mixture["fixed"], "mixture.fixed")

    m = config["method"]
    _choice(m["name"], "method.name", METHODS)
    _number(m["alpha"], "method.alpha", 0.0, 1.0, low_open=True, high_open=True)
    _number(m["tol"], "method.tol", 0.0)
    _choice(m["tau_mode"], "method.tau_mode", TAU_MODES)
    if m["tau_mode"] == "fixed":
        if m["tau"] is None:
            raise ConfigurationError("'method.tau' is required when method.tau_mode is 'fixed'")
        _number(m["tau"], "method.tau", 0.0)
    _number(m["gamma"], "method.gamma", 1.0, low_open=True)
    _number(m["mu2"], "method.mu2", 0.0, low_open=True)
    _number(m["lr"], "method.lr", 0.0, low_open=True)
    _integer(m["batch_size"], "method.batch_size", 1)
    if m["steps_per_epoch"] is not None:
        _integer(m["steps_per_epoch"], "method.steps_per_epoch", 2)
    _integer(m["epochs"], "method.epochs", 0)
    _integer(m["warmup_epochs"], "method.warmup_epochs", 0)
    _number(m["momentum"], "method.momentum", 0.0, 1.0, high_open=True)
    _number(m["weight_decay"], "method.weight_decay", 0.0)
    _flag(m["nesterov"], "method.nesterov")
    _choice(m["lr_schedule"], "method.lr_schedule", LR_SCHEDULES)
    _flag(m["calibrate_slope"], "method.calibrate_slope")
    if m["lambda_reg"] is not None:
        _number(m["lambda_reg"], "method.lambda_reg", 0.0)
    if m["margins"] is not None:
        if not isinstance(m["margins"], list) or len(m["margins"]) != 2:
            raise ConfigurationError("'method.margins' must be a list [m_in, m_out]")
        for i, margin in enumerate(m["margins"]):
            _number(margin, f"method.margins[{i}]")
    _number(m["tpr_target"], "method.tpr_target", 0.0, 1.0, low_open=True)

    model = config["model"]
    if not isinstance(model["hidden_dims"], list):
        raise ConfigurationError("'model.hidden_dims' must be a list")
    for i, width in enumerate(model["hidden_dims"]):
        _integer(width, f"model.hidden_dims[{i}]", 1)
    _choice(model["activation"], "model.activation", ACTIVATIONS)
    _flag(model["head"], "model.head")
    _integer(model["head_width"], "model.head_width", 1)
    _number(model["energy_slope_w"], "model.energy_slope_w")
    if m["name"] == "woods_nn" and not model["head"]:
        raise ConfigurationError("method 'woods_nn' needs 'model.head' set to true")
    if model["head"] and not model["hidden_dims"]:
        raise ConfigurationError("'model.head' needs at least one hidden layer")

    for key in ("data", "init", "training"):
        _integer(config["seeds"][key], f"seeds.{key}", 0)

    sweep = config["sweep"]
    for i, pi in enumerate(sweep["pi_values"]):
        _number(pi, f"sweep.pi_values[{i}]", 0.0, 1.0, low_open=True)
    for i, name in enumerate(sweep["methods"]):
        _choice(name, f"sweep.methods[{i}]", METHODS)
        if name == "woods_nn" and not model["head"]:
            raise ConfigurationError("sweep method 'woods_nn' needs 'model.head' set to true")
    _integer(sweep["workers"], "sweep.workers", 1)

    select = config["select"]
    for i, gamma in enumerate(select["gammas"]):
        _number(gamma, f"select.gammas[{i}]", 1.0, low_open=True)
    for i, mu2 in enumerate(select["mu2s"]):
        _number(mu2, f"select.mu2s[{i}]", 0.0, low_open=True)
    _number(select["epsilon"], "select.epsilon", 0.0)

    if not isinstance(config["output_dir"], str) or not config["output_dir"]:
        raise ConfigurationError("'output_dir' must be a nonempty string")


def load_config(path: str) -> ExperimentConfig:
    """
    Read a JSON experiment config

    The WILD_OOD_OUTPUT_DIR environment variable, when set, replaces
    output_dir.

    Args:
        path: Config file path

    Returns:
        ExperimentConfig
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} line {e.lineno}: invalid JSON ({e.msg})") from e

    override = os.environ.get(OUTPUT_DIR_ENV)
    if override:
        if not isinstance(payload, dict):
            raise ConfigurationError("config must be a JSON object")
        payload["output_dir"] = override
        logger.info(f"Output directory overridden by {OUTPUT_DIR_ENV}: {override}")

    config = ExperimentConfig.from_dict(payload)
    logger.info(f"Loaded config {path} (hash {config.config_hash()})")
    return config
