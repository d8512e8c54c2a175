"""
Neural Network Module for Wild OOD
Feedforward network with exact reverse-mode gradients, SGD with Nesterov
momentum and a central finite-difference gradient checker.

All arithmetic is float64. Every trainable parameter (network weights, the
energy slope w and the optional OOD head) lives in one ordered dictionary
keyed by a dotted parameter path, so optimizers, gradient checks and
serialization all walk the same structure.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from wild_ood.exceptions import (ConfigurationError, DataParseError,
                                 NumericError, ShapeError)
from wild_ood.logger import get_logger

logger = get_logger("nnet")

ACTIVATIONS = ("relu", "tanh")
FORMAT_VERSION = 1
DEFAULT_HEAD_WIDTH = 300
DEFAULT_ENERGY_SLOPE = -1.0

ENERGY_SLOPE_PATH = "energy_slope_w"
HEAD_HIDDEN_WEIGHT = "head.hidden.weight"
HEAD_HIDDEN_BIAS = "head.hidden.bias"
HEAD_OUTPUT_WEIGHT = "head.output.weight"
HEAD_OUTPUT_BIAS = "head.output.bias"


def _weight_path(layer: int) -> str:
    return f"layers.{layer}.weight"


def _bias_path(layer: int) -> str:
    return f"layers.{layer}.bias"


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    # relu'(0) is taken as 0
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


class MlpModel:
    """
    Multilayer perceptron holding the classifier weights, the learnable
    energy slope w and an optional one-hidden-layer OOD head.

    Weight matrices are stored as (out_dim, in_dim), so the first layer of
    dims [2, 8, 2] has an 8x2 weight and a bias of length 8.
    """

    def __init__(self, layer_dims: List[int], activation: str,
                 params: Dict[str, np.ndarray], head_width: Optional[int] = None):
        """
        Initialize from existing parameter arrays (use mlp_init for random init)

        Args:
            layer_dims: Input dim, hidden widths, number of classes K
            activation: 'relu' or 'tanh'
            params: Ordered mapping of parameter path to float64 array
            head_width: Hidden width of the OOD head, None when absent
        """
        self.layer_dims = [int(d) for d in layer_dims]
        self.activation = activation
        self.params = params
        self.head_width = head_width
        self._check_shapes()

    def _check_shapes(self):
        for layer in range(self.n_layers):
            fan_in, fan_out = self.layer_dims[layer], self.layer_dims[layer + 1]
            weight = self.params.get(_weight_path(layer))
            bias = self.params.get(_bias_path(layer))
            if weight is None or weight.shape != (fan_out, fan_in):
                raise ShapeError(f"layer {layer} weight must have shape ({fan_out}, {fan_in})")
            if bias is None or bias.shape != (fan_out,):
                raise ShapeError(f"layer {layer} bias must have length {fan_out}")
        if self.params.get(ENERGY_SLOPE_PATH, np.zeros(0)).shape != (1,):
            raise ShapeError("energy_slope_w must be a single value")
        if self.head_width is not None:
            feature_dim = self.layer_dims[-2]
            expected = {
                HEAD_HIDDEN_WEIGHT: (self.head_width, feature_dim),
                HEAD_HIDDEN_BIAS: (self.head_width,),
                HEAD_OUTPUT_WEIGHT: (self.head_width,),
                HEAD_OUTPUT_BIAS: (1,),
            }
            for path, shape in expected.items():
                if path not in self.params or self.params[path].shape != shape:
                    raise ShapeError(f"{path} must have shape {shape}")

    @property
    def n_layers(self) -> int:
        """Number of affine layers"""
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def has_head(self) -> bool:
        return self.head_width is not None

    @property
    def energy_slope_w(self) -> float:
        return float(self.params[ENERGY_SLOPE_PATH][0])

    @energy_slope_w.setter
    def energy_slope_w(self, value: float):
        self.params[ENERGY_SLOPE_PATH][0] = float(value)

    def weight(self, layer: int) -> np.ndarray:
        return self.params[_weight_path(layer)]

    def bias(self, layer: int) -> np.ndarray:
        return self.params[_bias_path(layer)]

    def parameter_paths(self) -> List[str]:
        """Return parameter paths in storage order"""
        return list(self.params.keys())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "MlpModel":
        """Deep copy of the model"""
        params = {path: value.copy() for path, value in self.params.items()}
        return MlpModel(self.layer_dims, self.activation, params, self.head_width)

    def __str__(self) -> str:
        head = f", head={self.head_width}" if self.has_head else ""
        return (f"MlpModel(dims={self.layer_dims}, activation={self.activation}"
                f"{head}, w={self.energy_slope_w:.4f})")


def is_decayed_parameter(path: str) -> bool:
    """
    Whether weight decay applies to a parameter

    Weight matrices and the head's output weight vector are decayed; biases
    and the energy slope are not.
    """
    return path.endswith(".weight")


def _init_weight(rng: np.random.Generator, fan_out: int, fan_in: int,
                 activation: str) -> np.ndarray:
    if activation == "relu":
        std = np.sqrt(2.0 / fan_in)
        return rng.normal(0.0, std, size=(fan_out, fan_in))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def mlp_init(layer_dims: List[int], activation: str = "relu", seed: int = 0,
             with_head: bool = False, head_width: int = DEFAULT_HEAD_WIDTH,
             energy_slope_w: float = DEFAULT_ENERGY_SLOPE) -> MlpModel:
    """
    Create a randomly initialized network

    He initialization is used for relu, Xavier-uniform for tanh, biases are
    zero. The result depends only on the arguments.

    Args:
        layer_dims: [input_dim, hidden..., n_classes], at least 2 entries, all > 0
        activation: 'relu' or 'tanh'
        seed: Seed for the initialization stream
        with_head: Attach the one-hidden-layer OOD head
        head_width: Hidden width of the OOD head
        energy_slope_w: Initial value of the learnable energy slope

    Returns:
        New MlpModel
    """
    if layer_dims is None or len(layer_dims) < 2:
        raise ConfigurationError("layer_dims needs at least an input and an output dimension")
    if any(int(d) != d or d <= 0 for d in layer_dims):
        raise ConfigurationError(f"layer_dims must be positive integers, got {layer_dims}")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got '{activation}'")
    if with_head and head_width <= 0:
        raise ConfigurationError("head_width must be positive")

    rng = np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    params: Dict[str, np.ndarray] = {}
    for layer in range(len(dims) - 1):
        params[_weight_path(layer)] = _init_weight(rng, dims[layer + 1], dims[layer], activation)
        params[_bias_path(layer)] = np.zeros(dims[layer + 1])
    params[ENERGY_SLOPE_PATH] = np.array([float(energy_slope_w)])

    if with_head:
        params[HEAD_HIDDEN_WEIGHT] = _init_weight(rng, head_width, dims[-2], activation)
        params[HEAD_HIDDEN_BIAS] = np.zeros(head_width)
        params[HEAD_OUTPUT_WEIGHT] = _init_weight(rng, 1, head_width, activation)[0]
        params[HEAD_OUTPUT_BIAS] = np.zeros(1)

    return MlpModel(dims, activation, params, head_width if with_head else None)


@dataclass
class ForwardTrace:
    """Cached activations of one forward pass, consumed by backward"""
    activations: List[np.ndarray]
    pre_activations: List[np.ndarray]
    logits: np.ndarray
    single: bool
    param_shapes: Tuple
    head_pre: Optional[np.ndarray] = None
    head_hidden: Optional[np.ndarray] = None
    head_score: Optional[np.ndarray] = None


def _param_shapes(model: MlpModel) -> Tuple:
    return tuple((path, value.shape) for path, value in model.params.items())


def _as_batch(model: MlpModel, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ShapeError(f"expected input of dimension {model.input_dim}, got shape {x.shape}")
    return batch, single


def forward(model: MlpModel, x: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Compute logits for one feature vector or an (N, d) batch

    Args:
        model: Network to evaluate
        x: Feature vector of length d or matrix of shape (N, d)

    Returns:
        (logits, trace) where logits has length K (or shape (N, K)) and the
        trace holds everything backward needs. When the model has an OOD
        head the head score g is stored in trace.head_score.
    """
    batch, single = _as_batch(model, x)

    activations = [batch]
    pre_activations = []
    current = batch
    for layer in range(model.n_layers):
        z = current @ model.weight(layer).T + model.bias(layer)
        pre_activations.append(z)
        if layer < model.n_layers - 1:
            current = _activate(z, model.activation)
            activations.append(current)
        else:
            current = z
    logits = current

    trace = ForwardTrace(activations=activations, pre_activations=pre_activations,
                         logits=logits, single=single, param_shapes=_param_shapes(model))

    if model.has_head:
        features = activations[-1]
        head_pre = features @ model.params[HEAD_HIDDEN_WEIGHT].T + model.params[HEAD_HIDDEN_BIAS]
        head_hidden = _activate(head_pre, model.activation)
        trace.head_pre = head_pre
        trace.head_hidden = head_hidden
        trace.head_score = head_hidden @ model.params[HEAD_OUTPUT_WEIGHT] + model.params[HEAD_OUTPUT_BIAS][0]

    if single:
        return logits[0], trace
    return logits, trace


class Gradients:
    """
    Gradient arrays keyed by the same parameter paths as the model
    """

    def __init__(self, arrays: Dict[str, np.ndarray]):
        self.arrays = arrays

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "Gradients":
        return cls({path: np.zeros_like(value) for path, value in model.params.items()})

    def __getitem__(self, path: str) -> np.ndarray:
        return self.arrays[path]

    def add(self, other: "Gradients") -> "Gradients":
        """Return the element-wise sum of two gradient sets"""
        return Gradients({path: value + other.arrays[path] for path, value in self.arrays.items()})

    def scaled(self, factor: float) -> "Gradients":
        return Gradients({path: value * factor for path, value in self.arrays.items()})

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.arrays.values() if v.size), default=0.0)

    def check_finite(self):
        """Raise NumericError naming the first parameter with a non-finite entry"""
        for path, value in self.arrays.items():
            if not np.all(np.isfinite(value)):
                raise NumericError("non-finite gradient", location=path)

    def is_congruent(self, model: MlpModel) -> bool:
        if list(self.arrays.keys()) != model.parameter_paths():
            return False
        return all(self.arrays[p].shape == model.params[p].shape for p in self.arrays)


def backward(model: MlpModel, trace: ForwardTrace, d_logits: np.ndarray,
             d_head: Optional[np.ndarray] = None) -> Gradients:
    """
    Reverse-mode gradient of a scalar loss through the network

    Args:
        model: The model that produced the trace
        trace: Trace returned by forward on the same model
        d_logits: dLoss/dLogits, same shape as the forward logits
        d_head: dLoss/dg for the OOD head score (length N), optional

    Returns:
        Gradients for every parameter; entries not reached (energy slope,
        head when d_head is None) are zero
    """
    if trace.param_shapes != _param_shapes(model):
        raise ShapeError("trace was produced by a model with different parameter shapes")

    delta = np.asarray(d_logits, dtype=np.float64)
    if trace.single:
        delta = delta[None, :] if delta.ndim == 1 else delta
    if delta.shape != trace.logits.shape:
        raise ShapeError(f"d_logits shape {np.shape(d_logits)} does not match logits "
                         f"shape {trace.logits.shape}")

    grads = Gradients.zeros_like(model)
    features = trace.activations[-1]
    d_features_from_head = None

    if d_head is not None:
        if not model.has_head:
            raise ShapeError("d_head given but the model has no OOD head")
        d_head = np.asarray(d_head, dtype=np.float64).reshape(-1)
        if d_head.shape[0] != delta.shape[0]:
            raise ShapeError("d_head length does not match the batch size")
        grads.arrays[HEAD_OUTPUT_WEIGHT] = trace.head_hidden.T @ d_head
        grads.arrays[HEAD_OUTPUT_BIAS] = np.array([d_head.sum()])
        d_hidden = np.outer(d_head, model.params[HEAD_OUTPUT_WEIGHT])
        d_head_pre = d_hidden * _activation_grad(trace.head_pre, trace.head_hidden, model.activation)
        grads.arrays[HEAD_HIDDEN_WEIGHT] = d_head_pre.T @ features
        grads.arrays[HEAD_HIDDEN_BIAS] = d_head_pre.sum(axis=0)
        d_features_from_head = d_head_pre @ model.params[HEAD_HIDDEN_WEIGHT]

    for layer in range(model.n_layers - 1, -1, -1):
        layer_input = trace.activations[layer]
        grads.arrays[_weight_path(layer)] = delta.T @ layer_input
        grads.arrays[_bias_path(layer)] = delta.sum(axis=0)
        if layer == 0:
            break
        d_input = delta @ model.weight(layer)
        if layer == model.n_layers - 1 and d_features_from_head is not None:
            d_input = d_input + d_features_from_head
        delta = d_input * _activation_grad(trace.pre_activations[layer - 1],
                                           trace.activations[layer], model.activation)

    return grads


@dataclass
class OptimizerState:
    """
    SGD hyperparameters and momentum buffers

    Attributes:
        velocity: Momentum buffer per parameter path
        learning_rate: Step size (mu_1)
        momentum: Momentum coefficient in [0, 1)
        weight_decay: L2 coefficient applied to weight matrices only
        nesterov: Use the Nesterov look-ahead form
    """
    velocity: Dict[str, np.ndarray]
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True

    @classmethod
    def create(cls, model: MlpModel, learning_rate: float, momentum: float = 0.9,
               weight_decay: float = 5e-4, nesterov: bool = True) -> "OptimizerState":
        """
        Build a fresh optimizer state with zero velocity

        Args:
            model: Model whose parameters will be optimized
            learning_rate: Step size, > 0
            momentum: Momentum in [0, 1)
            weight_decay: Weight decay, >= 0
            nesterov: Nesterov momentum flag

        Returns:
            OptimizerState
        """
        if not learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
        if not weight_decay >= 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {weight_decay}")
        velocity = {path: np.zeros_like(value) for path, value in model.params.items()}
        return cls(velocity, float(learning_rate), float(momentum), float(weight_decay), bool(nesterov))


def sgd_step(model: MlpModel, grads: Gradients, opt_state: OptimizerState) -> MlpModel:
    """
    One SGD step with optional Nesterov momentum and weight decay

    Velocity buffers in opt_state are updated in place; the input model is
    left untouched.

    Args:
        model: Current parameters
        grads: Gradients congruent with the model
        opt_state: Optimizer state

    Returns:
        Updated model
    """
    if not grads.is_congruent(model) or set(opt_state.velocity) != set(model.params):
        raise ShapeError("gradients or optimizer state are not shape-congruent with the model")
    grads.check_finite()

    updated = model.copy()
    lr, mu = opt_state.learning_rate, opt_state.momentum
    for path, value in updated.params.items():
        step = grads.arrays[path]
        if opt_state.weight_decay and is_decayed_parameter(path):
            step = step + opt_state.weight_decay * model.params[path]
        if mu != 0.0:
            velocity = mu * opt_state.velocity[path] + step
            opt_state.velocity[path] = velocity
            step = step + mu * velocity if opt_state.nesterov else velocity
        value -= lr * step
    return updated


@dataclass
class FiniteDiffReport:
    """Outcome of a finite-difference gradient check"""
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst_path: Optional[str] = None
    worst_index: Optional[int] = None
    errors: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


LossFunction = Callable[[MlpModel], Tuple[float, Gradients]]


def finite_diff_check(model: MlpModel, loss_fn: LossFunction, tolerance: float = 1e-4,
                      n_coords: int = 100, step: float = 1e-5, seed: int = 0,
                      abs_floor: float = 1e-6) -> FiniteDiffReport:
    """
    Compare analytic gradients with central differences

    A random subsample of parameter coordinates is perturbed by +/- step.
    The relative error of a coordinate is |a - n| / max(|a|, |n|, abs_floor),
    so coordinates whose gradients are both tiny are compared absolutely.

    Args:
        model: Point at which to check (not modified)
        loss_fn: Callable model -> (loss, Gradients), deterministic
        tolerance: Pass threshold on the maximum relative error
        n_coords: Number of coordinates to sample
        step: Finite-difference step
        seed: Seed of the coordinate subsample
        abs_floor: Denominator floor for near-zero gradients

    Returns:
        FiniteDiffReport
    """
    shifted = model.copy()
    _, analytic = loss_fn(shifted)

    coordinates = [(path, i) for path, value in shifted.params.items() for i in range(value.size)]
    rng = np.random.default_rng(seed)
    count = min(n_coords, len(coordinates))
    chosen = rng.choice(len(coordinates), size=count, replace=False)

    report = FiniteDiffReport(max_rel_error=0.0, n_checked=count, tolerance=tolerance)
    for index in sorted(int(c) for c in chosen):
        path, i = coordinates[index]
        flat = shifted.params[path].reshape(-1)
        original = flat[i]
        flat[i] = original + step
        loss_plus, _ = loss_fn(shifted)
        flat[i] = original - step
        loss_minus, _ = loss_fn(shifted)
        flat[i] = original

        numeric = (loss_plus - loss_minus) / (2.0 * step)
        exact = float(analytic.arrays[path].reshape(-1)[i])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
        report.errors.append(rel)
        if rel > report.max_rel_error or report.worst_path is None:
            report.max_rel_error = max(rel, report.max_rel_error)
            report.worst_path, report.worst_index = path, i

    logger.debug(f"Finite-difference check: {count} coordinates, "
                 f"max relative error {report.max_rel_error:.3e}")
    return report


def model_to_dict(model: MlpModel) -> Dict:
    """
    Serializable description of a model

    Returns:
        Dictionary with format_version, layer_dims, activation,
        energy_slope_w, per-layer flat weight/bias lists and the optional head
    """
    layers = []
    for layer in range(model.n_layers):
        layers.append({
            "weight": model.weight(layer).reshape(-1).tolist(),
            "bias": model.bias(layer).tolist(),
        })
    head = None
    if model.has_head:
        head = {
            "width": model.head_width,
            "hidden_weight": model.params[HEAD_HIDDEN_WEIGHT].reshape(-1).tolist(),
            "hidden_bias": model.params[HEAD_HIDDEN_BIAS].tolist(),
            "output_weight": model.params[HEAD_OUTPUT_WEIGHT].tolist(),
            "output_bias": float(model.params[HEAD_OUTPUT_BIAS][0]),
        }
    return {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "energy_slope_w": model.energy_slope_w,
        "layers": layers,
        "head": head,
    }


def model_from_dict(payload: Dict, source: str = None) -> MlpModel:
    """
    Rebuild a model from model_to_dict output

    Args:
        payload: Parsed JSON document
        source: File name used in error messages

    Returns:
        MlpModel
    """
    try:
        if payload.get("format_version") != FORMAT_VERSION:
            raise DataParseError(f"unsupported model format_version {payload.get('format_version')}",
                                 path=source)
        dims = [int(d) for d in payload["layer_dims"]]
        activation = payload["activation"]
        params: Dict[str, np.ndarray] = {}
        for layer, entry in enumerate(payload["layers"]):
            params[_weight_path(layer)] = np.array(entry["weight"], dtype=np.float64).reshape(
                dims[layer + 1], dims[layer])
            params[_bias_path(layer)] = np.array(entry["bias"], dtype=np.float64)
        params[ENERGY_SLOPE_PATH] = np.array([float(payload["energy_slope_w"])])
        head = payload.get("head")
        head_width = None
        if head is not None:
            head_width = int(head["width"])
            params[HEAD_HIDDEN_WEIGHT] = np.array(head["hidden_weight"], dtype=np.float64).reshape(
                head_width, dims[-2])
            params[HEAD_HIDDEN_BIAS] = np.array(head["hidden_bias"], dtype=np.float64)
            params[HEAD_OUTPUT_WEIGHT] = np.array(head["output_weight"], dtype=np.float64)
            params[HEAD_OUTPUT_BIAS] = np.array([float(head["output_bias"])])
    except (KeyError, TypeError, ValueError, IndexError) as e:
        if isinstance(e, DataParseError):
            raise
        raise DataParseError(f"malformed model document: {e}", path=source) from e

    if activation not in ACTIVATIONS:
        raise DataParseError(f"unknown activation '{activation}'", path=source)
    return MlpModel(dims, activation, params, head_width)


def save_model(model: MlpModel, file_path: str) -> str:
    """
    Write a model to a JSON file (sorted keys, so identical models give identical bytes)

    Returns:
        Path written
    """
    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump(model_to_dict(model), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Model saved to {file_path}")
    return file_path


def load_model(file_path: str) -> MlpModel:
    """
    Read a model written by save_model

    Args:
        file_path: Path to the JSON model file

    Returns:
        MlpModel
    """
    with open(file_path, 'r', encoding='utf-8') as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise DataParseError(f"invalid JSON: {e.msg}", path=file_path, line=e.lineno) from e
    return model_from_dict(payload, source=file_path)
