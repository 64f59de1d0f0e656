"""Environment-indexed datasets: CSV ingestion, dummy encoding, median splits, standardization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic.v1 import BaseModel, Field

logger = logging.getLogger("data")

TargetKind = Literal["continuous", "binary"]
# Object columns with fewer unparseable cells than this share are treated as broken numbers.
MOSTLY_NUMERIC_BAD_SHARE = 0.5


class DatasetError(ValueError):
    """Raised when a dataset cannot be built, parsed or transformed."""


@dataclass(frozen=True)
class Standardization:
    """Pooled (cross-environment) affine transform applied to a dataset."""

    predictor_means: np.ndarray
    predictor_sds: np.ndarray
    target_mean: float = 0.0
    target_sd: float = 1.0

    def to_dict(self) -> dict:
        return {
            "predictor_means": [float(v) for v in self.predictor_means],
            "predictor_sds": [float(v) for v in self.predictor_sds],
            "target_mean": float(self.target_mean),
            "target_sd": float(self.target_sd),
        }


@dataclass(frozen=True)
class EnvironmentDataset:
    X: List[np.ndarray]
    y: List[np.ndarray]
    predictor_names: List[str]
    target_name: str = "y"
    target_kind: TargetKind = "continuous"
    standardization: Optional[Standardization] = None
    env_labels: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.X or len(self.X) != len(self.y):
            raise DatasetError("need at least one environment with matching X and y blocks")
        X = [np.atleast_2d(np.asarray(x, dtype=float)) for x in self.X]
        y = [np.asarray(v, dtype=float).ravel() for v in self.y]
        n_predictors = len(self.predictor_names)
        for e, (xe, ye) in enumerate(zip(X, y)):
            if xe.shape[0] < 1:
                raise DatasetError(f"environment {e} is empty")
            if xe.shape[1] != n_predictors:
                raise DatasetError(
                    f"environment {e} has {xe.shape[1]} columns, expected {n_predictors}"
                )
            if xe.shape[0] != ye.shape[0]:
                raise DatasetError(f"environment {e}: X has {xe.shape[0]} rows, y has {ye.shape[0]}")
        if self.target_kind == "binary":
            values = np.unique(np.concatenate(y))
            if not set(values.tolist()) <= {0.0, 1.0}:
                raise DatasetError("binary targets must be coded 0/1")
        if self.standardization is not None and (
            np.any(self.standardization.predictor_sds <= 0) or self.standardization.target_sd <= 0
        ):
            raise DatasetError("standardization sds must be positive")
        labels = list(self.env_labels) or [str(e) for e in range(len(X))]
        if len(labels) != len(X):
            raise DatasetError("one label per environment is required")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "predictor_names", list(self.predictor_names))
        object.__setattr__(self, "env_labels", labels)

    @property
    def n_environments(self) -> int:
        return len(self.X)

    @property
    def n_predictors(self) -> int:
        return len(self.predictor_names)

    @property
    def sizes(self) -> List[int]:
        return [len(v) for v in self.y]

    def pooled(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.X), np.concatenate(self.y)

    def target_sd(self) -> float:
        return float(np.std(np.concatenate(self.y)))

    def per_environment_ols(self, columns: Optional[Sequence[int]] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per-environment least squares of y on the given columns (with intercept).

        Returns (coefficients, standard errors) per environment, intercept excluded.
        """
        cols = list(range(self.n_predictors)) if columns is None else list(columns)
        results = []
        for xe, ye in zip(self.X, self.y):
            design = np.column_stack([np.ones(len(ye)), xe[:, cols]])
            coef, _, rank, _ = np.linalg.lstsq(design, ye, rcond=None)
            dof = len(ye) - design.shape[1]
            if dof <= 0 or rank < design.shape[1]:
                raise DatasetError("per-environment OLS is underdetermined")
            resid = ye - design @ coef
            sigma2 = resid @ resid / dof
            cov = sigma2 * np.linalg.inv(design.T @ design)
            results.append((coef[1:], np.sqrt(np.diag(cov))[1:]))
        return results


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize(dataset: EnvironmentDataset) -> EnvironmentDataset:
    """Pooled mean 0 / sd 1 per predictor (and continuous target); records the transform."""
    X, y = dataset.pooled()
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    for name, sd in zip(dataset.predictor_names, sds):
        if not sd > 0:
            raise DatasetError(f"column {name!r} has zero variance and cannot be standardized")

    if dataset.target_kind == "continuous":
        y_mean = float(y.mean())
        y_sd = float(y.std())
        if not y_sd > 0:
            raise DatasetError(f"target {dataset.target_name!r} has zero variance")
    else:
        y_mean, y_sd = 0.0, 1.0

    return replace(
        dataset,
        X=[(xe - means) / sds for xe in dataset.X],
        y=[(ye - y_mean) / y_sd for ye in dataset.y],
        standardization=Standardization(
            predictor_means=means, predictor_sds=sds, target_mean=y_mean, target_sd=y_sd
        ),
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


class LoadOptions(BaseModel):
    target_kind: Literal["auto", "continuous", "binary"] = "auto"
    categorical_columns: List[str] = Field(default_factory=list)
    drop_columns: List[str] = Field(default_factory=list)

    class Config:
        extra = "forbid"


def read_frame(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as exc:
        raise DatasetError(f"file not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DatasetError(f"could not parse {path}: {exc}") from exc
    logger.info("CSV loaded | path=%s | rows=%d | columns=%d", path, len(frame), frame.shape[1])
    return frame


def _require_columns(frame: pd.DataFrame, columns: Sequence[str]) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DatasetError(f"missing columns: {', '.join(missing)}")


def _encode_target(series: pd.Series, kind: str) -> Tuple[np.ndarray, TargetKind]:
    if series.isna().any():
        raise DatasetError(f"target {series.name!r} has missing values")
    numeric = pd.api.types.is_numeric_dtype(series)
    levels = sorted(series.unique().tolist(), key=str)

    if kind == "continuous":
        if not numeric:
            raise DatasetError(f"target {series.name!r} is not numeric")
        return series.to_numpy(dtype=float), "continuous"

    if kind == "binary" or (kind == "auto" and (not numeric or set(levels) <= {0, 1})):
        if len(levels) > 2:
            raise DatasetError(f"target {series.name!r} has {len(levels)} levels; binary needs 2")
        if numeric and set(levels) <= {0, 1}:
            return series.to_numpy(dtype=float), "binary"
        # First level alphabetically maps to 0.
        mapping = {level: float(i) for i, level in enumerate(levels)}
        return series.map(mapping).to_numpy(dtype=float), "binary"

    if not numeric:
        raise DatasetError(f"target {series.name!r} is not numeric")
    return series.to_numpy(dtype=float), "continuous"


def _numeric_or_categorical(name: str, column: pd.Series) -> Optional[pd.Series]:
    """Float values for a column that parses as numbers, None for a categorical one.

    A column where most cells parse as numbers but some do not is rejected.
    """
    coerced = pd.to_numeric(column, errors="coerce")
    bad = coerced.isna()
    if not bad.any():
        return coerced.astype(float)
    if bad.mean() < MOSTLY_NUMERIC_BAD_SHARE:
        row = bad.idxmax()
        raise DatasetError(
            f"column {name!r} is numeric except for {int(bad.sum())} cell(s); "
            f"first bad cell at row {row}: {column.loc[row]!r}"
        )
    return None


def _encode_predictors(frame: pd.DataFrame, categorical: Sequence[str]) -> pd.DataFrame:
    """One-hot encode categorical columns, dropping the first level alphabetically."""
    encoded = []
    for name in frame.columns:
        column = frame[name]
        if column.isna().any():
            raise DatasetError(f"column {name!r} has missing values")
        numeric = None
        if name not in categorical:
            numeric = column if pd.api.types.is_numeric_dtype(column) else _numeric_or_categorical(name, column)
        if numeric is None:
            levels = sorted(column.astype(str).unique().tolist())
            if len(levels) < 2:
                raise DatasetError(f"categorical column {name!r} has a single level")
            cat = pd.Categorical(column.astype(str), categories=levels)
            dummies = pd.get_dummies(cat, prefix=name, prefix_sep="_", drop_first=True, dtype=float)
            dummies.index = frame.index
            encoded.append(dummies)
        else:
            encoded.append(numeric.astype(float).to_frame(name))
    if not encoded:
        raise DatasetError("no predictor columns left after dropping target and environment")
    return pd.concat(encoded, axis=1)


def _group_environments(
    labels: pd.Series, X: pd.DataFrame, y: np.ndarray
) -> Tuple[List[np.ndarray], List[np.ndarray], List[str]]:
    if labels.isna().any():
        raise DatasetError(f"environment column {labels.name!r} has missing values")
    keys = labels.astype(str)
    # Environments are ordered by first appearance; rows keep file order within groups.
    order = list(dict.fromkeys(keys.tolist()))
    X_blocks, y_blocks = [], []
    values = X.to_numpy(dtype=float)
    for key in order:
        mask = (keys == key).to_numpy()
        if not mask.any():
            raise DatasetError(f"environment {key!r} is empty")
        X_blocks.append(values[mask])
        y_blocks.append(y[mask])
    return X_blocks, y_blocks, order


def frame_to_dataset(
    frame: pd.DataFrame,
    target_column: str,
    env_column: str,
    options: Optional[LoadOptions] = None,
) -> EnvironmentDataset:
    options = options or LoadOptions()
    _require_columns(frame, [target_column, env_column, *options.drop_columns])
    y, kind = _encode_target(frame[target_column], options.target_kind)
    predictors = frame.drop(columns=[target_column, env_column, *options.drop_columns])
    X = _encode_predictors(predictors, options.categorical_columns)
    X_blocks, y_blocks, labels = _group_environments(frame[env_column], X, y)
    dataset = EnvironmentDataset(
        X=X_blocks,
        y=y_blocks,
        predictor_names=list(X.columns),
        target_name=target_column,
        target_kind=kind,
        env_labels=labels,
    )
    logger.info(
        "Dataset built | target=%s | kind=%s | environments=%d | predictors=%d | sizes=%s",
        target_column,
        kind,
        dataset.n_environments,
        dataset.n_predictors,
        dataset.sizes,
    )
    return dataset


def load_csv(
    path: Path,
    target_column: str,
    env_column: str,
    options: Optional[LoadOptions] = None,
) -> EnvironmentDataset:
    return frame_to_dataset(read_frame(path), target_column, env_column, options)


def derive_env_by_median(
    frame: pd.DataFrame,
    split_column: str,
    target_column: str,
    options: Optional[LoadOptions] = None,
) -> EnvironmentDataset:
    """Two environments: rows with split_column <= median, and rows above it."""
    _require_columns(frame, [split_column, target_column])
    column = frame[split_column]
    if not pd.api.types.is_numeric_dtype(column):
        raise DatasetError(f"split column {split_column!r} must be numeric")
    if column.nunique() < 2:
        raise DatasetError(f"split column {split_column!r} is constant; the split is degenerate")
    median = float(column.median())
    labels = np.where(column.to_numpy() <= median, "le_median", "gt_median")
    if len(set(labels.tolist())) < 2:
        raise DatasetError(f"median split on {split_column!r} leaves one environment empty")
    env_column = "__env__"
    working = frame.drop(columns=[split_column]).assign(**{env_column: labels})
    logger.info("Median split | column=%s | median=%s", split_column, median)
    return frame_to_dataset(working, target_column, env_column, options)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def dataset_to_frame(dataset: EnvironmentDataset, env_column: str = "env") -> pd.DataFrame:
    frames = []
    for label, xe, ye in zip(dataset.env_labels, dataset.X, dataset.y):
        block = pd.DataFrame(xe, columns=dataset.predictor_names)
        block.insert(0, dataset.target_name, ye)
        block.insert(0, env_column, label)
        frames.append(block)
    return pd.concat(frames, ignore_index=True)


def export_csv(dataset: EnvironmentDataset, path: Path, env_column: str = "env") -> None:
    dataset_to_frame(dataset, env_column).to_csv(path, index=False)
    logger.info("Dataset written | path=%s | rows=%d", path, sum(dataset.sizes))


def dataset_to_dict(dataset: EnvironmentDataset) -> Dict:
    return {
        "predictor_names": dataset.predictor_names,
        "target_name": dataset.target_name,
        "target_kind": dataset.target_kind,
        "environments": [
            {"label": label, "X": xe.tolist(), "y": ye.tolist()}
            for label, xe, ye in zip(dataset.env_labels, dataset.X, dataset.y)
        ],
        "standardization": (
            dataset.standardization.to_dict() if dataset.standardization is not None else None
        ),
    }


def export_json(dataset: EnvironmentDataset, path: Path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(dataset)))
