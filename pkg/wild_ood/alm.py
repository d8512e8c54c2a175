"""
ALM Module for Wild OOD
Augmented-Lagrangian training: the psi penalty, the per-batch surrogate
Lagrangian, epoch-end dual ascent and penalty scheduling, the WOODS loops
(sigmoid-energy and hinge-head variants) and a deterministic reference solver.

The constrained problem solved by woods_train is

    minimize    mean over wild of sigma(w * E(x))
    subject to  mean over ID of sigma(-w * E(x)) <= alpha
                mean over ID of CE(f(x), y)       <= tau
"""

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from wild_ood.data import LabeledDataset, WildDataset
from wild_ood.exceptions import (ConfigurationError, NumericError, ShapeError,
                                 UsageError)
from wild_ood.logger import get_logger
from wild_ood.losses import (cross_entropy, energy_score, hinge_head_grads,
                             hinge_head_losses, ood_loss_in, ood_loss_out)
from wild_ood.nnet import ENERGY_SLOPE_PATH, Gradients, MlpModel, backward, forward
from wild_ood.training import TrainConfig, run_epochs

logger = get_logger("alm")

EPOCH_LOG_COLUMNS = ["epoch", "ood_constraint", "cls_constraint", "objective",
                     "lambda1", "lambda2", "beta1", "beta2"]

# Full-data constraint evaluation processes the ID set in chunks of this size
EVAL_CHUNK_SIZE = 4096


def psi(u: float, v: float, beta: float) -> float:
    """
    Classical augmented-Lagrangian penalty for an inequality constraint u <= 0

    psi(u, v) = u v + (beta / 2) u^2   if beta u + v >= 0
              = -v^2 / (2 beta)        otherwise

    Args:
        u: Constraint value (violation when positive)
        v: Multiplier estimate
        beta: Penalty weight, > 0

    Returns:
        Penalty value
    """
    if not beta > 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    if beta * u + v >= 0:
        return u * v + 0.5 * beta * u * u
    return -v * v / (2.0 * beta)


def psi_grad(u: float, v: float, beta: float) -> Tuple[float, float]:
    """
    Partial derivatives of psi

    Returns:
        (dpsi/du, dpsi/dv): (v + beta u, u) on the active branch,
        (0, -v / beta) otherwise
    """
    if not beta > 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    if beta * u + v >= 0:
        return v + beta * u, u
    return 0.0, -v / beta


@dataclass
class ConstraintSpec:
    """
    Constraint levels of the constrained problem

    Attributes:
        alpha: Budget on the ID OOD-loss mean, in (0, 1]
        tau: Budget on the ID classification loss, >= 0 (inf disables it)
        tol: Tolerance before a violated constraint's penalty grows
    """
    alpha: float = 0.05
    tau: float = 1.0
    tol: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if np.isnan(self.tau) or self.tau < 0:
            raise ConfigurationError(f"tau must be >= 0, got {self.tau}")
        if not self.tol >= 0:
            raise ConfigurationError(f"tol must be >= 0, got {self.tol}")


@dataclass(frozen=True)
class AlmState:
    """
    Dual variables and penalty schedule

    Attributes:
        lambda1: Multiplier of the OOD constraint
        lambda2: Multiplier of the classification constraint
        beta1: Penalty weight of the OOD constraint
        beta2: Penalty weight of the classification constraint
        gamma: Penalty multiplier, > 1
        mu2: Dual learning rate, > 0
    """
    lambda1: float = 0.0
    lambda2: float = 0.0
    beta1: float = 1.0
    beta2: float = 1.0
    gamma: float = 1.5
    mu2: float = 1.0

    def __post_init__(self):
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise ConfigurationError("beta1 and beta2 must be > 0")
        if not self.gamma > 1:
            raise ConfigurationError(f"gamma must be > 1, got {self.gamma}")
        if not self.mu2 > 0:
            raise ConfigurationError(f"mu2 must be > 0, got {self.mu2}")


@dataclass
class EpochLog:
    """One row of the constraint trajectory"""
    epoch: int
    ood_constraint: float
    cls_constraint: float
    objective: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def epoch_logs_to_frame(logs: Sequence[EpochLog]) -> pd.DataFrame:
    """Tabulate epoch logs with the fixed CSV column order"""
    return pd.DataFrame([log.to_dict() for log in logs], columns=EPOCH_LOG_COLUMNS)


def save_epoch_logs(logs: Sequence[EpochLog], path: str) -> str:
    """
    Write epoch logs as CSV

    Returns:
        Path written
    """
    epoch_logs_to_frame(logs).to_csv(path, index=False, float_format='%.17g',
                                     lineterminator="\n")
    return path


IdBatch = Union[LabeledDataset, Tuple[np.ndarray, np.ndarray]]
WildBatch = Union[WildDataset, np.ndarray]


def _id_arrays(batch: IdBatch) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, LabeledDataset):
        return batch.features, batch.labels
    features, labels = batch
    return np.asarray(features, dtype=np.float64), np.asarray(labels)


def _wild_array(batch: WildBatch) -> np.ndarray:
    if isinstance(batch, WildDataset):
        return batch.training_view()
    return np.asarray(batch, dtype=np.float64)


def batch_lagrangian(model: MlpModel, id_batch: IdBatch, wild_batch: WildBatch,
                     spec: ConstraintSpec, state: AlmState,
                     use_head: bool = False) -> Tuple[float, Gradients]:
    """
    Per-batch surrogate Lagrangian and its gradient

    loss = mean_wild L_in + psi_beta1(mean_ID L_out - alpha, lambda1)
                          + psi_beta2(mean_ID CE - tau, lambda2)

    With use_head=False, L_in / L_out are the sigmoid energy losses and the
    gradient reaches the energy slope w. With use_head=True they are the
    hinge losses on the head score g. lambda and beta are constants here.

    Args:
        model: Current model
        id_batch: LabeledDataset or (features, labels)
        wild_batch: WildDataset or feature matrix
        spec: Constraint levels
        state: Multipliers and penalty weights
        use_head: Use the hinge-head losses

    Returns:
        (loss, Gradients)
    """
    id_x, id_y = _id_arrays(id_batch)
    wild_x = _wild_array(wild_batch)
    if len(id_x) == 0 or len(wild_x) == 0:
        raise UsageError("batch_lagrangian needs nonempty ID and wild batches")
    if use_head and not model.has_head:
        raise ConfigurationError("hinge-head losses need a model with an OOD head")
    n_id, n_wild = len(id_x), len(wild_x)

    wild_logits, wild_trace = forward(model, np.atleast_2d(wild_x))
    id_logits, id_trace = forward(model, np.atleast_2d(id_x))
    ce = cross_entropy(id_logits, id_y)
    cls_mean = float(np.mean(ce.value))

    w = model.energy_slope_w
    slope_grad = 0.0
    wild_d_head = id_d_head = None
    if use_head:
        wild_in, _ = hinge_head_losses(wild_trace.head_score)
        _, id_out = hinge_head_losses(id_trace.head_score)
        objective = float(np.mean(wild_in))
        ood_mean = float(np.mean(id_out))
        d_in, _ = hinge_head_grads(wild_trace.head_score)
        _, d_out = hinge_head_grads(id_trace.head_score)
        wild_d_logits = np.zeros_like(wild_logits)
    else:
        wild_loss = ood_loss_in(energy_score(wild_logits), w)
        id_loss = ood_loss_out(energy_score(id_logits), w)
        objective = float(np.mean(wild_loss.value))
        ood_mean = float(np.mean(id_loss.value))
        wild_d_logits = (wild_loss.grad_e / n_wild)[:, None] * softmax(wild_logits, axis=1)

    u1 = ood_mean - spec.alpha
    u2 = cls_mean - spec.tau
    dpsi1_du, _ = psi_grad(u1, state.lambda1, state.beta1)
    dpsi2_du, _ = psi_grad(u2, state.lambda2, state.beta2)

    id_d_logits = dpsi2_du * ce.grad_logits / n_id
    if use_head:
        wild_d_head = d_in / n_wild
        id_d_head = dpsi1_du * d_out / n_id
    else:
        id_d_logits = id_d_logits + dpsi1_du * (id_loss.grad_e / n_id)[:, None] * softmax(id_logits, axis=1)
        slope_grad = float(np.mean(wild_loss.grad_w)) + dpsi1_du * float(np.mean(id_loss.grad_w))

    grads = backward(model, wild_trace, wild_d_logits, wild_d_head).add(
        backward(model, id_trace, id_d_logits, id_d_head))
    grads.arrays[ENERGY_SLOPE_PATH] = np.array([slope_grad])

    loss = objective + psi(u1, state.lambda1, state.beta1) + psi(u2, state.lambda2, state.beta2)
    return loss, grads


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _per_sample_ood(model: MlpModel, x: np.ndarray, use_head: bool,
                    wild_side: bool) -> np.ndarray:
    values = []
    for rows in _chunks(len(x), EVAL_CHUNK_SIZE):
        logits, trace = forward(model, x[rows])
        if use_head:
            loss_in, loss_out = hinge_head_losses(trace.head_score)
            values.append(np.atleast_1d(loss_in if wild_side else loss_out))
        elif wild_side:
            values.append(np.atleast_1d(ood_loss_in(energy_score(logits), model.energy_slope_w).value))
        else:
            values.append(np.atleast_1d(ood_loss_out(energy_score(logits), model.energy_slope_w).value))
    return np.concatenate(values)


def evaluate_constraints(model: MlpModel, id_dataset: LabeledDataset,
                         wild: Optional[WildBatch] = None,
                         use_head: bool = False) -> Tuple[float, float, float]:
    """
    Full-data constraint values, evaluated exactly in fixed-size chunks

    Args:
        model: Model to evaluate
        id_dataset: Full ID training set
        wild: Full wild training set (objective is 0.0 when omitted)
        use_head: Evaluate the hinge-head losses instead of sigmoid energy

    Returns:
        (ood_constraint, cls_constraint, objective) as raw means; the
        constraint levels alpha and tau are not subtracted
    """
    if len(id_dataset) == 0:
        raise UsageError("ID dataset is empty")
    ood_values = _per_sample_ood(model, id_dataset.features, use_head, wild_side=False)
    ce_values = []
    for rows in _chunks(len(id_dataset), EVAL_CHUNK_SIZE):
        logits, _ = forward(model, id_dataset.features[rows])
        ce_values.append(np.atleast_1d(cross_entropy(logits, id_dataset.labels[rows]).value))
    objective = 0.0
    if wild is not None and len(wild):
        objective = float(np.mean(_per_sample_ood(model, _wild_array(wild), use_head, wild_side=True)))
    return float(np.mean(ood_values)), float(np.mean(np.concatenate(ce_values))), objective


def _energies(model: MlpModel, x: np.ndarray) -> np.ndarray:
    values = []
    for rows in _chunks(len(x), EVAL_CHUNK_SIZE):
        logits, _ = forward(model, x[rows])
        values.append(np.atleast_1d(energy_score(logits)))
    return np.concatenate(values)


def calibrate_energy_slope(model: MlpModel, id_dataset: LabeledDataset,
                           wild: WildBatch) -> MlpModel:
    """
    Center the energy and set the slope before constrained training

    CE training leaves E far from 0 on every input, where the sigmoid losses
    are flat and the multiplier updates stall. The output biases are shifted
    so that E = 0 lies halfway between the ID and wild median energies
    (logsumexp moves with the shift, softmax does not). Then w gets the sign
    that gives ID the higher in-score and magnitude 1 / max(1, median |E_id|)
    measured after the shift.

    Args:
        model: Warm-started model (not modified)
        id_dataset: Labeled ID training set
        wild: Wild training set

    Returns:
        Calibrated copy of the model
    """
    id_energy = _energies(model, id_dataset.features)
    wild_energy = _energies(model, _wild_array(wild))
    id_median, wild_median = float(np.median(id_energy)), float(np.median(wild_energy))
    center = 0.5 * (id_median + wild_median)
    scale = max(1.0, float(np.median(np.abs(id_energy - center))))
    direction = 1.0 if id_median >= wild_median else -1.0

    calibrated = model.copy()
    calibrated.bias(calibrated.n_layers - 1)[:] -= center
    calibrated.energy_slope_w = direction / scale
    logger.info(f"Energy calibration: ID median {id_median:.4f}, wild median {wild_median:.4f}, "
                f"shift {center:.4f}, w {model.energy_slope_w:.4f} -> {calibrated.energy_slope_w:.4f}")
    return calibrated


def full_lagrangian(model: MlpModel, id_dataset: LabeledDataset, wild: WildBatch,
                    spec: ConstraintSpec, state: AlmState, use_head: bool = False) -> float:
    """Lagrangian with full-data means in place of batch means"""
    ood, cls, objective = evaluate_constraints(model, id_dataset, wild, use_head)
    return (objective + psi(ood - spec.alpha, state.lambda1, state.beta1)
            + psi(cls - spec.tau, state.lambda2, state.beta2))


def dual_ascent_update(state: AlmState, spec: ConstraintSpec, ood_constraint: float,
                       cls_constraint: float) -> AlmState:
    """
    Gradient ascent on the multipliers

    lambda_i += mu2 * dpsi/dv at (u_i, lambda_i), with u1 = ood - alpha and
    u2 = cls - tau. Multipliers are not clamped.

    Args:
        state: Current state
        spec: Constraint levels
        ood_constraint: Full-data ID OOD-loss mean
        cls_constraint: Full-data ID classification loss

    Returns:
        New AlmState
    """
    _, d1 = psi_grad(ood_constraint - spec.alpha, state.lambda1, state.beta1)
    _, d2 = psi_grad(cls_constraint - spec.tau, state.lambda2, state.beta2)
    return replace(state, lambda1=state.lambda1 + state.mu2 * d1,
                   lambda2=state.lambda2 + state.mu2 * d2)


def penalty_update(state: AlmState, spec: ConstraintSpec, ood_constraint: float,
                   cls_constraint: float) -> AlmState:
    """
    Grow the penalty of each constraint violated beyond tolerance

    Returns:
        New AlmState; beta_i is multiplied by gamma when its constraint
        exceeds its level plus tol (strictly)
    """
    beta1, beta2 = state.beta1, state.beta2
    if ood_constraint > spec.alpha + spec.tol:
        beta1 = state.gamma * beta1
    if cls_constraint > spec.tau + spec.tol:
        beta2 = state.gamma * beta2
    return replace(state, beta1=beta1, beta2=beta2)


def _check_training_inputs(model: MlpModel, id_dataset: LabeledDataset, wild_dataset):
    if len(id_dataset) == 0:
        raise UsageError("ID training set is empty")
    if wild_dataset is None or len(wild_dataset) == 0:
        raise UsageError("wild training set is empty")
    if model.n_classes < 2:
        raise ConfigurationError("constrained training needs K >= 2 classes")
    if id_dataset.n_classes > model.n_classes:
        raise ShapeError(f"dataset has {id_dataset.n_classes} classes, model has {model.n_classes}")


def _alm_loop(model: MlpModel, id_dataset: LabeledDataset, wild_dataset: WildBatch,
              spec: ConstraintSpec, train_config: TrainConfig, state: AlmState,
              use_head: bool, run_name: str, activity_logger=None) -> Tuple[MlpModel, List[EpochLog]]:
    _check_training_inputs(model, id_dataset, wild_dataset)
    wild_x = _wild_array(wild_dataset)
    id_x, id_y = id_dataset.features, id_dataset.labels
    current_state = [state]

    def step(current: MlpModel, id_idx: np.ndarray, wild_idx: np.ndarray):
        return batch_lagrangian(current, (id_x[id_idx], id_y[id_idx]), wild_x[wild_idx],
                                spec, current_state[0], use_head)

    def epoch_end(epoch: int, current: MlpModel) -> EpochLog:
        ood, cls, objective = evaluate_constraints(current, id_dataset, wild_x, use_head)
        if not np.all(np.isfinite([ood, cls, objective])):
            raise NumericError(f"{run_name}: non-finite constraint value", location=f"epoch {epoch}")
        updated = dual_ascent_update(current_state[0], spec, ood, cls)
        updated = penalty_update(updated, spec, ood, cls)
        current_state[0] = updated
        if activity_logger is not None:
            activity_logger.log_epoch(epoch, ood, cls, objective)
        logger.info(f"{run_name} epoch {epoch}: ood={ood:.5f} cls={cls:.5f} "
                    f"objective={objective:.5f} lambda=({updated.lambda1:.4f}, "
                    f"{updated.lambda2:.4f}) beta=({updated.beta1:.4f}, {updated.beta2:.4f})")
        return EpochLog(epoch, ood, cls, objective, updated.lambda1, updated.lambda2,
                        updated.beta1, updated.beta2)

    return run_epochs(model, train_config, len(id_dataset), len(wild_x), step, epoch_end, run_name)


def woods_train(model: MlpModel, id_dataset: LabeledDataset, wild_dataset: WildBatch,
                spec: ConstraintSpec, train_config: TrainConfig, state: AlmState = None,
                activity_logger=None, calibrate_slope: bool = True) -> Tuple[MlpModel, List[EpochLog]]:
    """
    Constrained training with sigmoid energy losses

    Unless calibrate_slope is off, the starting model first goes through
    calibrate_energy_slope (skipped for 0 epochs). Each epoch runs T - 1 steps of batch_lagrangian + sgd_step on
    independently sampled ID and wild batches, then evaluates both
    constraints on the full ID training set, applies dual_ascent_update
    followed by penalty_update and appends an EpochLog (with the updated
    multipliers and penalties).

    Args:
        model: Starting model (not modified)
        id_dataset: Labeled ID training set
        wild_dataset: Unlabeled wild training set
        spec: Constraint levels
        train_config: Optimizer settings
        state: Initial multipliers/penalties (default lambda = 0, beta = 1)
        activity_logger: Optional ActivityLogger receiving one line per epoch
        calibrate_slope: Center E and rescale w before the first epoch

    Returns:
        (trained model, list of EpochLog)
    """
    if calibrate_slope and train_config.epochs > 0:
        _check_training_inputs(model, id_dataset, wild_dataset)
        model = calibrate_energy_slope(model, id_dataset, wild_dataset)
    return _alm_loop(model, id_dataset, wild_dataset, spec, train_config,
                     state or AlmState(), False, "woods", activity_logger)


def woods_nn_head_train(model: MlpModel, id_dataset: LabeledDataset, wild_dataset: WildBatch,
                        spec: ConstraintSpec, train_config: TrainConfig, state: AlmState = None,
                        activity_logger=None) -> Tuple[MlpModel, List[EpochLog]]:
    """
    Constrained training of the OOD head with hinge losses

    Identical to woods_train except that the wild objective is
    max(1 - g, 0) and the ID constraint is max(1 + g, 0) on the head score g.
    """
    if not model.has_head:
        raise ConfigurationError("woods_nn needs a model with an OOD head (model.head = true)")
    return _alm_loop(model, id_dataset, wild_dataset, spec, train_config,
                     state or AlmState(), True, "woods_nn", activity_logger)


@dataclass
class ConstrainedProblem:
    """
    Deterministic problem: minimize f(x) subject to h_i(x) <= 0

    Attributes:
        objective: f
        objective_grad: Gradient of f
        constraints: Functions h_i returning a float
        constraint_grads: Gradients of h_i
        x0: Starting point
    """
    objective: Callable[[np.ndarray], float]
    objective_grad: Callable[[np.ndarray], np.ndarray]
    constraints: List[Callable[[np.ndarray], float]]
    constraint_grads: List[Callable[[np.ndarray], np.ndarray]]
    x0: np.ndarray

    @classmethod
    def projection(cls, center: Sequence[float], a_matrix: Sequence[Sequence[float]],
                   b: Sequence[float], x0: Sequence[float] = None) -> "ConstrainedProblem":
        """
        minimize ||x - center||^2 subject to A x <= b

        Args:
            center: Unconstrained minimizer
            a_matrix: Constraint rows
            b: Constraint right-hand sides
            x0: Starting point (zeros by default)
        """
        c = np.asarray(center, dtype=np.float64)
        a = np.atleast_2d(np.asarray(a_matrix, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64)
        start = np.zeros_like(c) if x0 is None else np.asarray(x0, dtype=np.float64)
        return cls(
            objective=lambda x: float(np.sum((x - c) ** 2)),
            objective_grad=lambda x: 2.0 * (x - c),
            constraints=[lambda x, row=row, rhs=rhs: float(row @ x - rhs) for row, rhs in zip(a, b)],
            constraint_grads=[lambda x, row=row: row.copy() for row in a],
            x0=start,
        )


@dataclass
class AlmSchedule:
    """
    Outer/inner iteration settings for alm_reference_solve

    Attributes:
        outer_iterations: Maximum number of multiplier updates
        beta: Initial penalty weight (also the dual step size)
        gamma: Penalty multiplier applied while the violation exceeds tol
            (1 keeps beta fixed)
        beta_max: Cap on the penalty weight
        tol: Constraint violation tolerance and stopping threshold
        inner_tol: Gradient-norm tolerance of the inner minimization
        max_inner_iterations: Cap on inner gradient steps
    """
    outer_iterations: int = 200
    beta: float = 10.0
    gamma: float = 1.0
    beta_max: float = 1e6
    tol: float = 1e-8
    inner_tol: float = 1e-10
    max_inner_iterations: int = 10000


@dataclass
class ReferenceSolution:
    """Result of alm_reference_solve"""
    x: np.ndarray
    multipliers: np.ndarray
    outer_iterations: int
    max_violation: float
    history: List[float] = field(default_factory=list)


DIVERGENCE_NORM = 1e6


def alm_reference_solve(problem: ConstrainedProblem,
                        schedule: AlmSchedule = None) -> ReferenceSolution:
    """
    Deterministic augmented-Lagrangian solver for small smooth problems

    Each outer iteration minimizes f(x) + sum_i psi_beta(h_i(x), lambda_i)
    by gradient descent with Armijo backtracking, then sets
    lambda_i += beta * dpsi/dv (the classical multiplier update).

    Args:
        problem: Problem with at most 10 variables
        schedule: Iteration settings

    Returns:
        ReferenceSolution with the final iterate
    """
    schedule = schedule or AlmSchedule()
    x = np.asarray(problem.x0, dtype=np.float64).copy()
    if x.ndim != 1 or x.size > 10:
        raise ConfigurationError("reference solver handles vectors of at most 10 variables")
    if not schedule.beta > 0:
        raise ConfigurationError(f"beta must be > 0, got {schedule.beta}")

    multipliers = np.zeros(len(problem.constraints))
    beta = schedule.beta

    def lagrangian(point: np.ndarray) -> float:
        value = problem.objective(point)
        for h, lam in zip(problem.constraints, multipliers):
            value += psi(h(point), lam, beta)
        return value

    def lagrangian_grad(point: np.ndarray) -> np.ndarray:
        grad = np.asarray(problem.objective_grad(point), dtype=np.float64).copy()
        for h, dh, lam in zip(problem.constraints, problem.constraint_grads, multipliers):
            du, _ = psi_grad(h(point), lam, beta)
            if du:
                grad += du * np.asarray(dh(point), dtype=np.float64)
        return grad

    history = []
    violation = np.inf
    iteration = 0
    for iteration in range(1, schedule.outer_iterations + 1):
        # Inner minimization: gradient descent with Armijo backtracking
        for _ in range(schedule.max_inner_iterations):
            grad = lagrangian_grad(x)
            grad_sq = float(grad @ grad)
            if np.sqrt(grad_sq) <= schedule.inner_tol:
                break
            current = lagrangian(x)
            step = 1.0
            while step > 1e-16 and lagrangian(x - step * grad) > current - 0.5 * step * grad_sq:
                step *= 0.5
            x = x - step * grad
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
                raise NumericError("reference solver diverged", location=f"outer iteration {iteration}")

        values = np.array([h(x) for h in problem.constraints])
        for i, value in enumerate(values):
            _, dv = psi_grad(value, multipliers[i], beta)
            multipliers[i] += beta * dv
        violation = float(np.max(values, initial=0.0))
        history.append(problem.objective(x))
        if violation > schedule.tol:
            beta = min(beta * schedule.gamma, schedule.beta_max)
        elif len(history) > 1 and abs(history[-1] - history[-2]) <= schedule.tol:
            break

    logger.debug(f"Reference solve finished after {iteration} outer iterations, "
                 f"max violation {violation:.3e}")
    return ReferenceSolution(x=x, multipliers=multipliers, outer_iterations=iteration,
                             max_violation=max(violation, 0.0), history=history)
