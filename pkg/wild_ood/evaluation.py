"""
Evaluation Module for Wild OOD
Score extraction, detection metrics (FPR at a TPR target, AUROC), ID
accuracy, holdout threshold validation and model selection.

Scores are oriented so that higher means more in-distribution everywhere.
A sample is declared "in" when its score is >= the threshold.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from wild_ood.data import LabeledDataset
from wild_ood.exceptions import ConfigurationError, UsageError
from wild_ood.logger import get_logger
from wild_ood.losses import energy_score, msp_score, sigmoid
from wild_ood.nnet import MlpModel, forward

logger = get_logger("evaluation")

REPORT_SCHEMA_VERSION = 1
SCORERS = ("energy_sigmoid", "energy", "nn_head", "msp")


@dataclass
class ScoreSet:
    """
    ID and OOD scores, higher = more ID

    Attributes:
        id_scores: Scores of ID samples
        ood_scores: Scores of OOD samples
    """
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64).reshape(-1)
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.id_scores)) and np.all(np.isfinite(self.ood_scores))):
            raise UsageError("scores must be finite")

    def swapped(self) -> "ScoreSet":
        return ScoreSet(self.ood_scores, self.id_scores)


@dataclass
class DetectionReport:
    """
    Detection and classification metrics of one model/scorer pair

    Attributes:
        fpr_at_95tpr: Fraction of OOD samples declared ID at the TPR threshold
        auroc: Area under the ROC curve
        accuracy: ID classification accuracy
        threshold: Score threshold reaching the TPR target
        n_id: Number of ID test samples
        n_ood: Number of OOD test samples
        scorer: Scoring rule
        tpr_target: TPR the threshold was chosen for
        constraint_trajectory: Per-epoch ID OOD-constraint values, when known
    """
    fpr_at_95tpr: float
    auroc: float
    accuracy: float
    threshold: float
    n_id: int
    n_ood: int
    scorer: str = "energy_sigmoid"
    tpr_target: float = 0.95
    constraint_trajectory: List[float] = field(default_factory=list)

    @property
    def counts(self) -> Tuple[int, int]:
        return self.n_id, self.n_ood

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["schema_version"] = REPORT_SCHEMA_VERSION
        return payload


def score_energy(model: MlpModel, x: np.ndarray):
    """
    Sigmoid energy in-score sigma(w * E(x))

    Args:
        model: Trained model
        x: Feature vector or (N, d) matrix

    Returns:
        Score(s) in (0, 1), higher = more ID under the trained orientation
    """
    logits, _ = forward(model, x)
    return sigmoid(model.energy_slope_w * np.asarray(energy_score(logits)))


def score_energy_raw(model: MlpModel, x: np.ndarray):
    """
    Plain energy score E(x) = logsumexp of the logits, higher = more ID

    Used for models whose slope w was never trained.
    """
    logits, _ = forward(model, x)
    return energy_score(logits)


def score_msp(model: MlpModel, x: np.ndarray):
    """Maximum softmax probability score"""
    logits, _ = forward(model, x)
    return msp_score(logits)


def score_nn_head(model: MlpModel, x: np.ndarray):
    """
    OOD-head in-score -g(x) (the head is trained with large g for outliers)
    """
    if not model.has_head:
        raise ConfigurationError("scorer 'nn_head' needs a model with an OOD head")
    _, trace = forward(model, x)
    score = -trace.head_score
    return float(score[0]) if trace.single else score


_SCORE_FUNCTIONS = {
    "energy_sigmoid": score_energy,
    "energy": score_energy_raw,
    "nn_head": score_nn_head,
    "msp": score_msp,
}


def compute_scores(model: MlpModel, x: np.ndarray, scorer: str = "energy_sigmoid") -> np.ndarray:
    """
    Score a feature matrix with a named scorer

    Returns:
        One score per row
    """
    if scorer not in _SCORE_FUNCTIONS:
        raise ConfigurationError(f"scorer must be one of {SCORERS}, got '{scorer}'")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.atleast_1d(np.asarray(_SCORE_FUNCTIONS[scorer](model, x), dtype=np.float64))


def fpr_at_tpr(scores: ScoreSet, tpr_target: float = 0.95) -> Tuple[float, float]:
    """
    False positive rate at the largest threshold reaching a TPR target

    The threshold t is the largest value with #{id >= t} / n_id >= tpr_target,
    i.e. the k-th largest ID score for k = ceil(tpr_target * n_id).

    Args:
        scores: ID and OOD scores
        tpr_target: TPR in (0, 1]

    Returns:
        (fpr, threshold) with fpr = #{ood >= t} / n_ood
    """
    if not 0.0 < tpr_target <= 1.0:
        raise ConfigurationError(f"tpr_target must lie in (0, 1], got {tpr_target}")
    n_id = len(scores.id_scores)
    if n_id == 0:
        raise UsageError("fpr_at_tpr needs ID scores")
    if len(scores.ood_scores) == 0:
        raise UsageError("fpr_at_tpr needs OOD scores")

    # Guard against 0.95 * 100 landing a hair above 95
    k = min(max(math.ceil(tpr_target * n_id - 1e-9), 1), n_id)
    threshold = float(np.sort(scores.id_scores)[::-1][k - 1])
    fpr = float(np.mean(scores.ood_scores >= threshold))
    return fpr, threshold


def auroc(scores: ScoreSet) -> float:
    """
    Area under the ROC curve via the Mann-Whitney rank sum

    Equals (#{id > ood} + 0.5 * #{id == ood}) / (n_id * n_ood) over all
    pairs, computed from mid-ranks of the pooled scores.
    """
    n_id, n_ood = len(scores.id_scores), len(scores.ood_scores)
    if n_id == 0 or n_ood == 0:
        raise UsageError("auroc needs ID and OOD scores")
    ranks = rankdata(np.concatenate([scores.id_scores, scores.ood_scores]), method="average")
    u_statistic = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return float(u_statistic / (n_id * n_ood))


def accuracy(model: MlpModel, dataset: LabeledDataset) -> float:
    """
    Fraction of samples whose argmax logit equals the label

    Argmax ties go to the lowest class index.
    """
    if len(dataset) == 0:
        raise UsageError("accuracy needs a nonempty dataset")
    logits, _ = forward(model, dataset.features)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# Slack on the feasibility comparison of rate <= alpha + epsilon
FEASIBILITY_SLACK = 1e-12


def validate_threshold(holdout_id_scores: Sequence[float], holdout_wild_scores: Sequence[float],
                       alpha: float, epsilon: float = 0.0) -> Tuple[float, float]:
    """
    Holdout threshold selection under an ID false-rejection budget

    Candidates are the distinct scores plus -inf and +inf. Among candidates
    whose ID-out rate #{id < t} / n_id is <= alpha + epsilon, the one with
    the smallest wild-in rate #{wild >= t} / n_wild wins; ties go to the
    larger threshold. t = -inf is always feasible.

    Returns:
        (threshold, wild_in_rate)
    """
    threshold, wild_in, _ = _validate(holdout_id_scores, holdout_wild_scores, alpha, epsilon)
    return threshold, wild_in


def _validate(holdout_id_scores, holdout_wild_scores, alpha: float,
              epsilon: float) -> Tuple[float, float, float]:
    id_scores = np.sort(np.asarray(holdout_id_scores, dtype=np.float64).reshape(-1))
    wild_scores = np.sort(np.asarray(holdout_wild_scores, dtype=np.float64).reshape(-1))
    if len(id_scores) == 0 or len(wild_scores) == 0:
        raise UsageError("validate_threshold needs ID and wild holdout scores")
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {epsilon}")

    candidates = np.concatenate([[-np.inf], np.unique(np.concatenate([id_scores, wild_scores])),
                                 [np.inf]])
    id_out = np.searchsorted(id_scores, candidates, side="left") / len(id_scores)
    wild_in = (len(wild_scores) - np.searchsorted(wild_scores, candidates, side="left")) / len(wild_scores)
    feasible = id_out <= alpha + epsilon + FEASIBILITY_SLACK

    best = np.min(wild_in[feasible])
    # Largest feasible candidate reaching the minimum
    index = int(np.flatnonzero(feasible & (wild_in == best))[-1])
    return float(candidates[index]), float(wild_in[index]), float(id_out[index])


@dataclass
class ModelCandidate:
    """Holdout scores of one trained model"""
    name: str
    holdout_id_scores: np.ndarray
    holdout_wild_scores: np.ndarray


@dataclass
class SelectionResult:
    """
    Outcome of select_model

    Attributes:
        name: Winning candidate
        threshold: Its validated threshold
        wild_in_rate: Its holdout wild-in rate
        id_out_rate: Its holdout ID-out rate
        table: One row per candidate (name, threshold, wild_in_rate, id_out_rate)
    """
    name: str
    threshold: float
    wild_in_rate: float
    id_out_rate: float
    table: List[Dict] = field(default_factory=list)


def select_model(candidates: Sequence[ModelCandidate], alpha: float,
                 epsilon: float = 0.0) -> SelectionResult:
    """
    Pick a model across a hyperparameter grid by holdout validation

    Every candidate is thresholded with validate_threshold. The winner has the
    lowest wild-in rate, then the lowest ID-out rate, then the smallest name.
    """
    if not candidates:
        raise UsageError("select_model needs at least one candidate")
    rows = []
    for candidate in candidates:
        threshold, wild_in, id_out = _validate(candidate.holdout_id_scores,
                                               candidate.holdout_wild_scores, alpha, epsilon)
        rows.append({"name": candidate.name, "threshold": threshold,
                     "wild_in_rate": wild_in, "id_out_rate": id_out})
    best = min(rows, key=lambda row: (row["wild_in_rate"], row["id_out_rate"], row["name"]))
    logger.info(f"Selected {best['name']}: wild-in {best['wild_in_rate']:.4f}, "
                f"ID-out {best['id_out_rate']:.4f}")
    return SelectionResult(best["name"], best["threshold"], best["wild_in_rate"],
                           best["id_out_rate"], rows)


def evaluate(model: MlpModel, id_test: LabeledDataset, ood_test: np.ndarray,
             scorer: str = "energy_sigmoid", tpr_target: float = 0.95,
             constraint_trajectory: Optional[Sequence[float]] = None) -> DetectionReport:
    """
    Score ID and OOD test data and compute all metrics

    Args:
        model: Trained model
        id_test: Labeled ID test set
        ood_test: OOD test feature matrix
        scorer: 'energy_sigmoid', 'nn_head' or 'msp'
        tpr_target: TPR for the FPR threshold
        constraint_trajectory: Optional per-epoch constraint values to attach

    Returns:
        DetectionReport
    """
    report, _ = evaluate_with_scores(model, id_test, ood_test, scorer, tpr_target,
                                     constraint_trajectory)
    return report


def evaluate_with_scores(model: MlpModel, id_test: LabeledDataset, ood_test: np.ndarray,
                         scorer: str = "energy_sigmoid", tpr_target: float = 0.95,
                         constraint_trajectory: Optional[Sequence[float]] = None
                         ) -> Tuple[DetectionReport, ScoreSet]:
    """evaluate, also returning the ScoreSet behind the report"""
    if len(id_test) == 0 or len(ood_test) == 0:
        raise UsageError("evaluate needs nonempty ID and OOD test sets")
    scores = ScoreSet(compute_scores(model, id_test.features, scorer),
                      compute_scores(model, ood_test, scorer))
    fpr, threshold = fpr_at_tpr(scores, tpr_target)
    report = DetectionReport(
        fpr_at_95tpr=fpr,
        auroc=auroc(scores),
        accuracy=accuracy(model, id_test),
        threshold=threshold,
        n_id=len(scores.id_scores),
        n_ood=len(scores.ood_scores),
        scorer=scorer,
        tpr_target=tpr_target,
        constraint_trajectory=[float(v) for v in (constraint_trajectory or [])],
    )
    return report, scores


def scores_to_frame(scores: ScoreSet) -> pd.DataFrame:
    """Long-format score table with columns 'set' ('id'/'ood') and 'score'"""
    return pd.DataFrame({
        "set": ["id"] * len(scores.id_scores) + ["ood"] * len(scores.ood_scores),
        "score": np.concatenate([scores.id_scores, scores.ood_scores]),
    })
