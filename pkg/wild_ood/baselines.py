"""
Baselines Module for Wild OOD
Regularization baselines trained on the same (ID, wild) data as the
constrained trainer: CE-only, Outlier Exposure and energy-regularized
learning. Each minimizes mean CE on ID batches plus lambda_reg times a
regularizer on wild (and, for ERL, ID) batches.
"""

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from wild_ood.alm import EpochLog, evaluate_constraints
from wild_ood.data import LabeledDataset, WildDataset
from wild_ood.exceptions import ConfigurationError, UsageError
from wild_ood.logger import get_logger
from wild_ood.losses import LossValue, cross_entropy
from wild_ood.nnet import Gradients, MlpModel, backward, forward
from wild_ood.training import TrainConfig, run_epochs

logger = get_logger("baselines")

BASELINE_METHODS = ("ce_only", "oe", "energy_reg")

# (m_in, m_out) on the free energy F = -E: ID pushed below m_in = -25, wild
# above m_out = -7. Quoted on the logsumexp scale E the same pair reads
# ID above 25 and wild below 7.
DEFAULT_ENERGY_MARGINS = (-25.0, -7.0)

OE_LAMBDA_GRID = (0.1, 0.5, 1.0)
ENERGY_LAMBDA_GRID = (0.1, 1.0, 5.0)

WARMUP_TAU_MULTIPLIER = 2.0


@dataclass
class BaselineConfig:
    """
    Baseline method settings

    Attributes:
        method: 'ce_only', 'oe' or 'energy_reg'
        lambda_reg: Regularizer weight, >= 0
        margins: (m_in, m_out) for energy_reg; must be None otherwise
    """
    method: str = "ce_only"
    lambda_reg: float = 0.0
    margins: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.method not in BASELINE_METHODS:
            raise ConfigurationError(f"baseline method must be one of {BASELINE_METHODS}, "
                                     f"got '{self.method}'")
        if not self.lambda_reg >= 0:
            raise ConfigurationError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.method == "energy_reg":
            if self.margins is None:
                raise ConfigurationError("energy_reg needs margins (m_in, m_out)")
            if len(self.margins) != 2:
                raise ConfigurationError("margins must be a pair (m_in, m_out)")
            self.margins = (float(self.margins[0]), float(self.margins[1]))
        elif self.margins is not None:
            raise ConfigurationError(f"margins only apply to energy_reg, not '{self.method}'")


def oe_regularizer(logits: np.ndarray) -> LossValue:
    """
    Cross-entropy of the softmax against the uniform distribution, minus ln K

    Equals logsumexp(logits) - mean(logits) per row; it is shift-invariant
    and zero exactly at uniform logits.

    Args:
        logits: (N, K) logits of wild samples

    Returns:
        LossValue with per-row values and grad_logits = softmax - 1/K
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    value = logsumexp(logits, axis=1) - logits.mean(axis=1)
    grad = softmax(logits, axis=1) - 1.0 / logits.shape[1]
    return LossValue(value=value, grad_logits=grad)


def energy_regularizer(id_logits: np.ndarray, wild_logits: np.ndarray,
                       margins: Tuple[float, float]) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Squared-hinge energy regularizer on the free energy F = -logsumexp(logits)

    R = mean_ID max(0, F - m_in)^2 + mean_wild max(0, m_out - F)^2

    Margins follow the DEFAULT_ENERGY_MARGINS convention: both are free-energy
    levels with m_in < m_out, so (-25, -7) keeps ID at F <= -25 and wild at
    F >= -7.

    Args:
        id_logits: (N_id, K) logits of ID samples
        wild_logits: (N_wild, K) logits of wild samples
        margins: (m_in, m_out)

    Returns:
        (R, dR/d id_logits, dR/d wild_logits)
    """
    m_in, m_out = margins
    id_logits = np.atleast_2d(np.asarray(id_logits, dtype=np.float64))
    wild_logits = np.atleast_2d(np.asarray(wild_logits, dtype=np.float64))

    id_free = -logsumexp(id_logits, axis=1)
    wild_free = -logsumexp(wild_logits, axis=1)
    id_gap = np.maximum(id_free - m_in, 0.0)
    wild_gap = np.maximum(m_out - wild_free, 0.0)
    value = float(np.mean(id_gap ** 2) + np.mean(wild_gap ** 2))

    # dF/dlogits = -softmax
    id_d_free = 2.0 * id_gap / len(id_logits)
    wild_d_free = -2.0 * wild_gap / len(wild_logits)
    id_grad = -id_d_free[:, None] * softmax(id_logits, axis=1)
    wild_grad = -wild_d_free[:, None] * softmax(wild_logits, axis=1)
    return value, id_grad, wild_grad


def _check_inputs(model: MlpModel, id_dataset: LabeledDataset):
    if len(id_dataset) == 0:
        raise UsageError("ID training set is empty")
    if id_dataset.n_classes > model.n_classes:
        raise ConfigurationError(f"dataset has {id_dataset.n_classes} classes, "
                                 f"model has {model.n_classes}")


def _wild_features(wild_dataset) -> np.ndarray:
    if isinstance(wild_dataset, WildDataset):
        return wild_dataset.training_view()
    return np.asarray(wild_dataset, dtype=np.float64)


def _ce_step(model: MlpModel, x: np.ndarray, y: np.ndarray):
    logits, trace = forward(model, x)
    ce = cross_entropy(logits, y)
    grads = backward(model, trace, ce.grad_logits / len(x))
    return float(np.mean(ce.value)), grads, logits, trace


def _baseline_loop(model: MlpModel, id_dataset: LabeledDataset, wild_x: Optional[np.ndarray],
                   config: BaselineConfig, train_config: TrainConfig,
                   activity_logger=None) -> Tuple[MlpModel, list]:
    _check_inputs(model, id_dataset)
    id_x, id_y = id_dataset.features, id_dataset.labels
    n_wild = 0 if wild_x is None else len(wild_x)
    if config.method != "ce_only" and n_wild == 0:
        raise UsageError(f"{config.method} needs a nonempty wild training set")

    def step(current: MlpModel, id_idx: np.ndarray, wild_idx: Optional[np.ndarray]):
        x, y = id_x[id_idx], id_y[id_idx]
        loss, grads, id_logits, id_trace = _ce_step(current, x, y)
        if config.method == "ce_only":
            return loss, grads

        wild_logits, wild_trace = forward(current, wild_x[wild_idx])
        if config.method == "oe":
            reg = oe_regularizer(wild_logits)
            reg_value = float(np.mean(reg.value))
            reg_grads = backward(current, wild_trace,
                                 config.lambda_reg * reg.grad_logits / len(wild_idx))
        else:
            reg_value, id_grad, wild_grad = energy_regularizer(id_logits, wild_logits, config.margins)
            reg_grads = backward(current, id_trace, config.lambda_reg * id_grad).add(
                backward(current, wild_trace, config.lambda_reg * wild_grad))
        return loss + config.lambda_reg * reg_value, grads.add(reg_grads)

    def epoch_end(epoch: int, current: MlpModel) -> EpochLog:
        ood, cls, _ = evaluate_constraints(current, id_dataset)
        objective = regularizer_value(current, id_dataset, wild_x, config)
        if activity_logger is not None:
            activity_logger.log_epoch(epoch, ood, cls, objective)
        logger.info(f"{config.method} epoch {epoch}: ood={ood:.5f} cls={cls:.5f} "
                    f"regularizer={objective:.5f}")
        return EpochLog(epoch, ood, cls, objective)

    return run_epochs(model, train_config, len(id_dataset), n_wild, step, epoch_end, config.method)


def regularizer_value(model: MlpModel, id_dataset: LabeledDataset, wild_x: Optional[np.ndarray],
                      config: BaselineConfig) -> float:
    """
    Full-data regularizer mean of a baseline (0.0 for ce_only)
    """
    if config.method == "ce_only" or wild_x is None or len(wild_x) == 0:
        return 0.0
    wild_logits, _ = forward(model, wild_x)
    if config.method == "oe":
        return float(np.mean(oe_regularizer(wild_logits).value))
    id_logits, _ = forward(model, id_dataset.features)
    value, _, _ = energy_regularizer(id_logits, wild_logits, config.margins)
    return value


def ce_only_train(model: MlpModel, id_dataset: LabeledDataset, train_config: TrainConfig,
                  activity_logger=None) -> Tuple[MlpModel, list]:
    """
    Plain cross-entropy training on the ID data

    Args:
        model: Starting model (not modified)
        id_dataset: Labeled ID training set
        train_config: Optimizer settings
        activity_logger: Optional ActivityLogger

    Returns:
        (trained model, list of EpochLog with zero multipliers)
    """
    return _baseline_loop(model, id_dataset, None, BaselineConfig("ce_only"),
                          train_config, activity_logger)


def oe_train(model: MlpModel, id_dataset: LabeledDataset, wild_dataset,
             config: BaselineConfig, train_config: TrainConfig,
             activity_logger=None) -> Tuple[MlpModel, list]:
    """
    Outlier Exposure: CE + lambda_reg * mean oe_regularizer over wild batches

    With lambda_reg = 0 the parameter trajectory equals ce_only_train under
    the same train_config.

    Returns:
        (trained model, list of EpochLog)
    """
    if config.method != "oe":
        raise ConfigurationError(f"oe_train needs method 'oe', got '{config.method}'")
    return _baseline_loop(model, id_dataset, _wild_features(wild_dataset), config,
                          train_config, activity_logger)


def energy_reg_train(model: MlpModel, id_dataset: LabeledDataset, wild_dataset,
                     config: BaselineConfig, train_config: TrainConfig,
                     activity_logger=None) -> Tuple[MlpModel, list]:
    """
    Energy-regularized learning: CE + lambda_reg * energy_regularizer

    Returns:
        (trained model, list of EpochLog)
    """
    if config.method != "energy_reg":
        raise ConfigurationError(f"energy_reg_train needs method 'energy_reg', "
                                 f"got '{config.method}'")
    return _baseline_loop(model, id_dataset, _wild_features(wild_dataset), config,
                          train_config, activity_logger)


def warmup_tau(model: MlpModel, id_dataset: LabeledDataset, train_config: TrainConfig,
               warmup_epochs: int, multiplier: float = WARMUP_TAU_MULTIPLIER,
               activity_logger=None) -> Tuple[MlpModel, float, float]:
    """
    CE-only warm-up that defines the classification budget

    Args:
        model: Freshly initialized model
        id_dataset: Labeled ID training set
        train_config: Optimizer settings (epochs replaced by warmup_epochs)
        warmup_epochs: Number of CE-only epochs
        multiplier: tau = multiplier * warm-up CE

    Returns:
        (warm model, warm-up full-data CE, tau)
    """
    warm, _ = ce_only_train(model, id_dataset, replace(train_config, epochs=warmup_epochs),
                            activity_logger)
    _, warm_ce, _ = evaluate_constraints(warm, id_dataset)
    tau = multiplier * warm_ce
    logger.info(f"Warm-up finished after {warmup_epochs} epochs: CE {warm_ce:.5f}, tau {tau:.5f}")
    return warm, warm_ce, tau
