"""
Training Module for Wild OOD
Optimizer schedule, mini-batch sampling and the epoch loop shared by the
constrained trainer and the regularization baselines.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from wild_ood.exceptions import ConfigurationError, NumericError, UsageError
from wild_ood.logger import get_logger
from wild_ood.nnet import Gradients, MlpModel, OptimizerState, sgd_step

logger = get_logger("training")

LR_SCHEDULES = ("constant", "step", "cosine")

# Fractions of the run after which the step schedule halves the rate
STEP_MILESTONES = (0.5, 0.75, 0.9)


@dataclass
class TrainConfig:
    """
    Optimizer and schedule settings for one training run

    Attributes:
        epochs: Number of epochs (0 returns the model unchanged)
        batch_size: Mini-batch size B for ID and wild batches
        steps_per_epoch: T; each epoch takes T - 1 steps. None means
            max(2, ceil(n / B)) for n ID training samples
        learning_rate: Primal step size mu_1
        momentum: SGD momentum in [0, 1)
        weight_decay: L2 coefficient on weight matrices
        nesterov: Nesterov momentum flag
        lr_schedule: 'constant', 'step' or 'cosine'
        seed: Seed of the batch sampler
    """
    epochs: int = 50
    batch_size: int = 128
    steps_per_epoch: Optional[int] = None
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    lr_schedule: str = "constant"
    seed: int = 0

    def validate(self):
        """Raise ConfigurationError on out-of-range settings"""
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigurationError(f"batch_size must be > 0, got {self.batch_size}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 2:
            raise ConfigurationError(f"steps_per_epoch must be >= 2, got {self.steps_per_epoch}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}, "
                                     f"got '{self.lr_schedule}'")

    def steps_for(self, n_samples: int) -> int:
        """Number T for a training set of n_samples"""
        if self.steps_per_epoch is not None:
            return self.steps_per_epoch
        return max(2, math.ceil(n_samples / self.batch_size))

    def learning_rate_at(self, epoch: int) -> float:
        """
        Learning rate used during an epoch

        Args:
            epoch: 0-based epoch index

        Returns:
            Scheduled learning rate
        """
        if self.lr_schedule == "step":
            passed = sum(epoch >= int(fraction * self.epochs) for fraction in STEP_MILESTONES)
            return self.learning_rate / (2.0 ** passed)
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


class BatchSampler:
    """
    Uniform-with-replacement index sampler for ID and wild batches

    The two index streams come from independent child seeds, so a run that
    never draws wild batches sees exactly the same ID batches as one that does.
    """

    def __init__(self, seed: int, n_id: int, n_wild: int, batch_size: int):
        """
        Initialize sampler

        Args:
            seed: Sampler seed
            n_id: ID training set size
            n_wild: Wild training set size (0 when unused)
            batch_size: Indices per batch
        """
        id_seed, wild_seed = np.random.SeedSequence(seed).spawn(2)
        self.id_rng = np.random.default_rng(id_seed)
        self.wild_rng = np.random.default_rng(wild_seed)
        self.n_id = n_id
        self.n_wild = n_wild
        self.batch_size = batch_size

    def id_batch(self) -> np.ndarray:
        return self.id_rng.integers(0, self.n_id, size=self.batch_size)

    def wild_batch(self) -> Optional[np.ndarray]:
        if self.n_wild == 0:
            return None
        return self.wild_rng.integers(0, self.n_wild, size=self.batch_size)


StepFunction = Callable[[MlpModel, np.ndarray, Optional[np.ndarray]], Tuple[float, Gradients]]
EpochEndFunction = Callable[[int, MlpModel], object]


def run_epochs(model: MlpModel, train_config: TrainConfig, n_id: int, n_wild: int,
               step_fn: StepFunction, epoch_end_fn: EpochEndFunction,
               run_name: str = "training") -> Tuple[MlpModel, list]:
    """
    Generic SGD epoch loop

    Each epoch takes T - 1 steps. A step draws fresh ID (and wild) index
    batches, asks step_fn for (loss, gradients) and applies sgd_step. After
    the steps, epoch_end_fn(epoch, model) is called and its return value is
    appended to the log.

    Args:
        model: Starting model (not modified)
        train_config: Optimizer settings
        n_id: ID training set size
        n_wild: Wild training set size (0 for ID-only training)
        step_fn: Callable (model, id_indices, wild_indices) -> (loss, Gradients)
        epoch_end_fn: Callable (epoch, model) -> log entry
        run_name: Name used in log lines

    Returns:
        (trained model, list of epoch log entries)
    """
    train_config.validate()
    if n_id == 0:
        raise UsageError("ID training set is empty")

    current = model.copy()
    logs = []
    if train_config.epochs == 0:
        return current, logs

    steps = train_config.steps_for(n_id)
    sampler = BatchSampler(train_config.seed, n_id, n_wild, train_config.batch_size)
    opt_state = OptimizerState.create(current, train_config.learning_rate,
                                      train_config.momentum, train_config.weight_decay,
                                      train_config.nesterov)
    logger.info(f"{run_name}: {train_config.epochs} epochs x {steps - 1} steps, "
                f"batch size {train_config.batch_size}")

    for epoch in range(train_config.epochs):
        opt_state.learning_rate = train_config.learning_rate_at(epoch)
        for batch in range(steps - 1):
            location = f"epoch {epoch}, batch {batch}"
            loss, grads = step_fn(current, sampler.id_batch(), sampler.wild_batch())
            if not np.isfinite(loss):
                raise NumericError(f"{run_name}: non-finite loss", location=location)
            try:
                grads.check_finite()
            except NumericError as e:
                raise NumericError(f"{run_name}: non-finite gradient for {e.location}",
                                   location=location) from e
            current = sgd_step(current, grads, opt_state)
            logger.debug(f"{run_name} {location}: loss {loss:.6f}")
        logs.append(epoch_end_fn(epoch, current))

    return current, logs
