"""
Data Module for Wild OOD
Synthetic ID/OOD generators, the contaminated wild-mixture sampler,
deterministic splits and CSV loading/saving of feature datasets.
"""

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from wild_ood.exceptions import ConfigurationError, DataParseError, UsageError
from wild_ood.logger import get_logger

logger = get_logger("data")

FROM_IN = 0
FROM_OUT = 1
PROVENANCE_NAMES = {FROM_IN: "from_in", FROM_OUT: "from_out"}


@dataclass
class LabeledDataset:
    """
    In-distribution samples with class labels

    Attributes:
        features: (n, d) float64 matrix
        labels: (n,) int64 class indices in [0, n_classes)
        n_classes: Number of classes K
        label_names: Original label strings by index (CSV datasets), or None
    """
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    label_names: Optional[List[str]] = None

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64)
        self.labels = np.array(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise UsageError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise UsageError("features and labels must have equal length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise UsageError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise UsageError("features must be finite")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[indices], self.labels[indices],
                              self.n_classes, self.label_names)


@dataclass
class WildDataset:
    """
    Unlabeled wild samples

    The provenance flags (FROM_IN / FROM_OUT) exist only for synthetically
    built mixtures and are for evaluation. Training code reads samples
    through training_view(), which carries no flags.
    """
    features: np.ndarray
    provenance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise UsageError("features must be a 2-D array")
        if not np.all(np.isfinite(self.features)):
            raise UsageError("features must be finite")
        if self.provenance is not None:
            self.provenance = np.array(self.provenance, dtype=np.int8)
            if self.provenance.shape != (self.features.shape[0],):
                raise UsageError("features and provenance must have equal length")
            self.provenance.setflags(write=False)
        self.features.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    def training_view(self) -> np.ndarray:
        """Read-only feature matrix without provenance"""
        return self.features

    def subset(self, indices: np.ndarray) -> "WildDataset":
        provenance = None if self.provenance is None else self.provenance[indices]
        return WildDataset(self.features[indices], provenance)

    def out_fraction(self) -> float:
        """Fraction of samples drawn from the OOD pool"""
        if self.provenance is None:
            raise UsageError("dataset has no provenance flags")
        return float(np.mean(self.provenance == FROM_OUT))


@dataclass
class MixtureSpec:
    """
    Wild mixture parameters: each draw is OOD with probability pi

    Attributes:
        pi: Mixing ratio in (0, 1]
        m: Number of wild samples
        seed: Sampler seed
        fixed: Draw exactly floor(pi * m) OOD samples instead of Bernoulli draws
    """
    pi: float
    m: int
    seed: int = 0
    fixed: bool = False

    def __post_init__(self):
        if not 0.0 < self.pi <= 1.0:
            raise ConfigurationError(f"pi must lie in (0, 1], got {self.pi}")
        if self.m < 0:
            raise ConfigurationError(f"m must be >= 0, got {self.m}")


@dataclass
class GaussianTaskSpec:
    """
    Gaussian ID classes plus Gaussian OOD component(s)

    Covariances may be given as full (d, d) matrices or as diagonal vectors.

    Attributes:
        class_means: One mean per ID class (K >= 2)
        class_covs: One covariance per ID class
        class_counts: Samples to draw per ID class
        ood_mean: Mean of the wild OOD component
        ood_cov: Covariance of the wild OOD component
        ood_count: Samples to draw from the OOD component
        test_ood_mean: Optional separate test-time OOD component mean
        test_ood_cov: Covariance of the test-time OOD component
        test_ood_count: Samples of the test-time OOD component
    """
    class_means: Sequence[Sequence[float]]
    class_covs: Sequence
    class_counts: Sequence[int]
    ood_mean: Sequence[float]
    ood_cov: Sequence
    ood_count: int
    test_ood_mean: Optional[Sequence[float]] = None
    test_ood_cov: Optional[Sequence] = None
    test_ood_count: int = 0


@dataclass
class SyntheticTask:
    """Output of a generator: labeled ID data and OOD pool(s)"""
    id_data: LabeledDataset
    ood_pool: np.ndarray
    test_ood_pool: Optional[np.ndarray] = None

    def __iter__(self):
        # Unpacks as (LabeledDataset, ood_pool)
        return iter((self.id_data, self.ood_pool))


def _cholesky(cov, dim: int, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 1:
        if cov.shape != (dim,):
            raise ConfigurationError(f"{name}: diagonal covariance must have length {dim}")
        cov = np.diag(cov)
    if cov.shape != (dim, dim):
        raise ConfigurationError(f"{name}: covariance must be {dim}x{dim}")
    if not np.allclose(cov, cov.T):
        raise ConfigurationError(f"{name}: covariance must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ConfigurationError(f"{name}: covariance is not positive definite") from e


def _draw_gaussian(rng: np.random.Generator, mean, chol: np.ndarray, count: int) -> np.ndarray:
    z = rng.standard_normal(size=(count, chol.shape[0]))
    return np.asarray(mean, dtype=np.float64) + z @ chol.T


def gen_gaussian_task(spec: GaussianTaskSpec, seed: int = 0) -> SyntheticTask:
    """
    Draw a Gaussian ID/OOD task

    Args:
        spec: Means, covariances and counts
        seed: Generator seed; the result is a pure function of (spec, seed)

    Returns:
        SyntheticTask (unpacks as (LabeledDataset, ood_pool))
    """
    means = np.asarray(spec.class_means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ConfigurationError("need at least two ID classes")
    n_classes, dim = means.shape
    if len(spec.class_covs) != n_classes or len(spec.class_counts) != n_classes:
        raise ConfigurationError("class_means, class_covs and class_counts must have equal length")
    if any(c <= 0 for c in spec.class_counts):
        raise ConfigurationError("every class count must be positive")
    if spec.ood_count <= 0:
        raise ConfigurationError("ood_count must be positive")
    if len(spec.ood_mean) != dim:
        raise ConfigurationError(f"ood_mean must have length {dim}")

    chols = [_cholesky(cov, dim, f"class {k}") for k, cov in enumerate(spec.class_covs)]
    ood_chol = _cholesky(spec.ood_cov, dim, "ood")

    rng = np.random.default_rng(seed)
    features, labels = [], []
    for k in range(n_classes):
        features.append(_draw_gaussian(rng, means[k], chols[k], int(spec.class_counts[k])))
        labels.append(np.full(int(spec.class_counts[k]), k))
    ood_pool = _draw_gaussian(rng, spec.ood_mean, ood_chol, int(spec.ood_count))

    test_pool = None
    if spec.test_ood_mean is not None:
        if spec.test_ood_count <= 0:
            raise ConfigurationError("test_ood_count must be positive when test_ood_mean is set")
        test_cov = spec.test_ood_cov if spec.test_ood_cov is not None else spec.ood_cov
        test_chol = _cholesky(test_cov, dim, "test ood")
        test_pool = _draw_gaussian(rng, spec.test_ood_mean, test_chol, int(spec.test_ood_count))

    id_data = LabeledDataset(np.vstack(features), np.concatenate(labels), n_classes)
    logger.info(f"Generated gaussian task: {len(id_data)} ID samples, {len(ood_pool)} OOD samples")
    return SyntheticTask(id_data, ood_pool, test_pool)


# Moons occupy x in [-1, 2], y in [-0.5, 1]
MOONS_BOUNDING_BOX = ((-1.0, 2.0), (-0.5, 1.0))
MOONS_CENTER = (0.5, 0.25)


def gen_moons_ring_task(noise: float, class_counts: Sequence[int], ood_count: int,
                        seed: int = 0, ring_radius: float = 3.0) -> SyntheticTask:
    """
    Two interleaved half-circles as ID classes inside a noisy OOD ring

    Gaussian noise is truncated at four standard deviations per coordinate,
    so every ID point lies within the moons' bounding box grown by 4 * noise.

    Args:
        noise: Standard deviation of the point noise, >= 0
        class_counts: Samples for the upper and lower moon
        ood_count: Samples on the ring
        seed: Generator seed
        ring_radius: Radius of the OOD ring around the moons' center

    Returns:
        SyntheticTask (unpacks as (LabeledDataset, ood_pool))
    """
    if noise < 0:
        raise ConfigurationError(f"noise must be >= 0, got {noise}")
    if len(class_counts) != 2 or any(c <= 0 for c in class_counts):
        raise ConfigurationError("moons need two positive class counts")
    if ood_count <= 0:
        raise ConfigurationError("ood_count must be positive")
    if ring_radius <= 0:
        raise ConfigurationError(f"ring_radius must be positive, got {ring_radius}")

    rng = np.random.default_rng(seed)

    def jitter(count: int) -> np.ndarray:
        return np.clip(rng.standard_normal(size=(count, 2)), -4.0, 4.0) * noise

    n_upper, n_lower = int(class_counts[0]), int(class_counts[1])
    t_upper = rng.uniform(0.0, np.pi, size=n_upper)
    t_lower = rng.uniform(0.0, np.pi, size=n_lower)
    upper = np.column_stack([np.cos(t_upper), np.sin(t_upper)]) + jitter(n_upper)
    lower = np.column_stack([1.0 - np.cos(t_lower), 0.5 - np.sin(t_lower)]) + jitter(n_lower)

    angles = rng.uniform(0.0, 2.0 * np.pi, size=ood_count)
    ring = np.column_stack([np.cos(angles), np.sin(angles)]) * ring_radius
    ring = ring + np.asarray(MOONS_CENTER) + jitter(ood_count)

    id_data = LabeledDataset(np.vstack([upper, lower]),
                             np.concatenate([np.zeros(n_upper), np.ones(n_lower)]), 2)
    logger.info(f"Generated moons/ring task: {len(id_data)} ID samples, {ood_count} OOD samples")
    return SyntheticTask(id_data, ring)


def make_wild(id_pool: np.ndarray, ood_pool: np.ndarray, spec: MixtureSpec) -> WildDataset:
    """
    Sample a contaminated wild set from an ID pool and an OOD pool

    Each draw picks the OOD pool with probability pi (independent Bernoulli),
    then a uniform element of that pool with replacement. With spec.fixed,
    exactly floor(pi * m) draws come from the OOD pool, in shuffled order.

    Args:
        id_pool: (n_in, d) ID feature vectors
        ood_pool: (n_out, d) OOD feature vectors
        spec: Mixture parameters

    Returns:
        WildDataset with provenance flags
    """
    ood_pool = np.asarray(ood_pool, dtype=np.float64)
    if len(ood_pool) == 0:
        raise UsageError("ood_pool must be nonempty")
    ood_pool = ood_pool.reshape(len(ood_pool), -1)
    id_pool = np.asarray(id_pool, dtype=np.float64).reshape(-1, ood_pool.shape[1])
    if spec.pi < 1.0 and len(id_pool) == 0:
        raise UsageError("id_pool must be nonempty when pi < 1")

    rng = np.random.default_rng(spec.seed)
    if spec.fixed:
        n_out = int(np.floor(spec.pi * spec.m))
        provenance = np.zeros(spec.m, dtype=np.int8)
        provenance[:n_out] = FROM_OUT
        provenance = rng.permutation(provenance)
    else:
        provenance = (rng.random(spec.m) < spec.pi).astype(np.int8)

    features = np.empty((spec.m, ood_pool.shape[1]))
    out_mask = provenance == FROM_OUT
    n_out = int(out_mask.sum())
    features[out_mask] = ood_pool[rng.integers(0, len(ood_pool), size=n_out)]
    if spec.m - n_out:
        features[~out_mask] = id_pool[rng.integers(0, len(id_pool), size=spec.m - n_out)]

    logger.info(f"Sampled wild set: {spec.m} samples, {n_out} from OOD pool (pi={spec.pi})")
    return WildDataset(features, provenance)


Splittable = Union[LabeledDataset, WildDataset, np.ndarray]


def split(dataset: Splittable, fractions: Sequence[float], seed: int = 0) -> List[Splittable]:
    """
    Deterministic shuffle-split into disjoint parts

    Part sizes come from rounding the cumulative fractions times n, so the
    parts always cover every index exactly once.

    Args:
        dataset: LabeledDataset, WildDataset or (n, d) array
        fractions: Part fractions in [0, 1] summing to 1 (within 1e-9)
        seed: Shuffle seed

    Returns:
        List of parts of the same type as the input
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0.0 or f > 1.0 for f in fractions):
        raise ConfigurationError(f"fractions must lie in [0, 1], got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got {sum(fractions)}")

    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.rint(np.cumsum([0.0] + fractions) * n).astype(int)
    bounds[-1] = n

    parts = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        indices = order[start:stop]
        if isinstance(dataset, np.ndarray):
            parts.append(dataset[indices])
        else:
            parts.append(dataset.subset(indices))
    return parts


def split_indices(n: int, fractions: Sequence[float], seed: int = 0) -> List[np.ndarray]:
    """Index sets produced by split for a dataset of size n"""
    return split(np.arange(n), fractions, seed)


@dataclass
class CsvSchema:
    """
    Column layout of a feature CSV

    Attributes:
        label_column: Column with class labels, or None for unlabeled files
        feature_columns: Feature columns in order; None means every other column
        label_names: Fixed label dictionary (index order); None derives it from the file
    """
    label_column: Optional[str] = None
    feature_columns: Optional[List[str]] = None
    label_names: Optional[List[str]] = None


def load_csv(path: str, schema: CsvSchema = None) -> Union[LabeledDataset, np.ndarray]:
    """
    Load a feature CSV with a header row

    Numbers are plain decimals with a period separator; scientific notation
    is accepted. Labels are mapped to dense indices through a label
    dictionary kept in label_names: the schema's fixed dictionary when given,
    otherwise the distinct labels in sorted order (numeric order when every
    label is an integer), so files sharing a label set agree on indices.

    Args:
        path: CSV file path
        schema: Column layout (default: unlabeled, all columns are features)

    Returns:
        LabeledDataset when schema.label_column is set, else an (n, d) array
    """
    schema = schema or CsvSchema()
    if not os.path.exists(path):
        raise FileNotFoundError(f"CSV file not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError as e:
        raise DataParseError("file is empty or has no header row", path=path, line=1) from e
    except pd.errors.ParserError as e:
        raise DataParseError(f"ragged rows: {e}", path=path) from e

    # Blank lines come back as all-NaN rows; drop them but keep each row's file line
    blank = frame.isna().all(axis=1).to_numpy()
    lines = np.flatnonzero(~blank) + 2
    frame = frame[~blank].reset_index(drop=True)

    columns = list(frame.columns)
    if schema.label_column is not None and schema.label_column not in columns:
        raise DataParseError(f"unknown label column '{schema.label_column}'", path=path, line=1)
    if schema.feature_columns is not None:
        unknown = [c for c in schema.feature_columns if c not in columns]
        if unknown:
            raise DataParseError(f"unknown feature columns {unknown}", path=path, line=1)
        feature_columns = list(schema.feature_columns)
    else:
        feature_columns = [c for c in columns if c != schema.label_column]
    if not feature_columns:
        raise DataParseError("no feature columns", path=path, line=1)

    # Short rows are padded with NaN by pandas; treat them like empty fields
    used = feature_columns + ([schema.label_column] if schema.label_column else [])
    stripped = frame[used].fillna("").astype(str).apply(lambda col: col.str.strip())
    missing = stripped == ""
    if missing.to_numpy().any():
        row = int(np.argmax(missing.to_numpy().any(axis=1)))
        raise DataParseError("row has a missing field", path=path, line=int(lines[row]))

    values = np.empty((len(frame), len(feature_columns)))
    for j, column in enumerate(feature_columns):
        parsed = pd.to_numeric(stripped[column], errors='coerce')
        bad = parsed.isna().to_numpy()
        if bad.any():
            row = int(np.argmax(bad))
            raise DataParseError(f"non-numeric value '{frame[column].iloc[row]}' in column "
                                 f"'{column}'", path=path, line=int(lines[row]))
        # numpy's string conversion rounds correctly, so %.17g files reload bit for bit
        values[:, j] = stripped[column].to_numpy(dtype=str).astype(np.float64)
    if not np.all(np.isfinite(values)):
        row = int(np.argmax(~np.isfinite(values).all(axis=1)))
        raise DataParseError("non-finite feature value", path=path, line=int(lines[row]))

    logger.info(f"Loaded {len(frame)} rows from {path}")
    if schema.label_column is None:
        return values

    raw_labels = stripped[schema.label_column]
    label_names = list(schema.label_names) if schema.label_names is not None \
        else _sorted_labels(raw_labels.unique().tolist())
    lookup = {name: index for index, name in enumerate(label_names)}
    unknown = ~raw_labels.isin(label_names)
    if unknown.any():
        row = int(np.argmax(unknown.to_numpy()))
        raise DataParseError(f"unknown label '{raw_labels.iloc[row]}'", path=path, line=int(lines[row]))
    labels = raw_labels.map(lookup).to_numpy(dtype=np.int64)
    return LabeledDataset(values, labels, len(label_names), label_names)


def _sorted_labels(names: List[str]) -> List[str]:
    try:
        return sorted(names, key=int)
    except ValueError:
        return sorted(names)


def feature_column_names(dim: int) -> List[str]:
    return [f"x{j}" for j in range(dim)]


def _feature_frame(features: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(features, columns=feature_column_names(features.shape[1]))


FLOAT_FORMAT = '%.17g'


def save_labeled_csv(dataset: LabeledDataset, path: str, label_column: str = "label") -> str:
    """
    Write a labeled dataset (features x0..x{d-1} plus a label column)

    Labels are written as their original strings when label_names is set.

    Returns:
        Path written
    """
    frame = _feature_frame(dataset.features)
    if dataset.label_names is not None:
        frame[label_column] = [dataset.label_names[i] for i in dataset.labels]
    else:
        frame[label_column] = dataset.labels
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def save_features_csv(features: np.ndarray, path: str) -> str:
    """Write an unlabeled feature matrix"""
    _feature_frame(np.asarray(features)).to_csv(path, index=False, float_format=FLOAT_FORMAT,
                                                lineterminator="\n")
    return path


def save_wild_csv(wild: WildDataset, path: str, provenance_path: str = None) -> str:
    """
    Write a wild set; provenance goes to a separate side-file

    Args:
        wild: Wild dataset
        path: Feature CSV path
        provenance_path: Side-file path (only written when flags exist)

    Returns:
        Feature CSV path
    """
    save_features_csv(wild.features, path)
    if wild.provenance is not None and provenance_path is not None:
        names = [PROVENANCE_NAMES[int(p)] for p in wild.provenance]
        pd.DataFrame({"provenance": names}).to_csv(provenance_path, index=False,
                                                   lineterminator="\n")
    return path


def load_wild_csv(path: str, provenance_path: str = None) -> WildDataset:
    """
    Read a wild set written by save_wild_csv

    Returns:
        WildDataset (with provenance when the side-file is given)
    """
    features = load_csv(path)
    provenance = None
    if provenance_path is not None:
        if not os.path.exists(provenance_path):
            raise FileNotFoundError(f"provenance file not found: {provenance_path}")
        frame = pd.read_csv(provenance_path, dtype=str, keep_default_na=False,
                            skip_blank_lines=False)
        if "provenance" not in frame.columns:
            raise DataParseError("missing 'provenance' column", path=provenance_path, line=1)
        blank = frame.isna().all(axis=1).to_numpy()
        lines = np.flatnonzero(~blank) + 2
        frame = frame[~blank].reset_index(drop=True)
        lookup = {name: flag for flag, name in PROVENANCE_NAMES.items()}
        unknown = ~frame["provenance"].isin(list(lookup))
        if unknown.any():
            row = int(np.argmax(unknown.to_numpy()))
            raise DataParseError("unknown provenance flag", path=provenance_path, line=int(lines[row]))
        provenance = frame["provenance"].map(lookup).to_numpy(dtype=np.int8)
    return WildDataset(features, provenance)
