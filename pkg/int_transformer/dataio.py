"""
Dataset plumbing
CSV ingestion into single-step-ahead sliding windows, MinMax normalization
and RMSE evaluation
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler as SklearnMinMaxScaler

from .errors import DataIOError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Provenance:
    """Where a dataset came from"""
    source: str
    feature_columns: Tuple[str, ...]
    target_column: str
    split: str = 'all'
    n: int = 0


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """
    (n x m) input windows and the target one step after each window

    inputs has shape (samples, n, m), targets has shape (samples,).
    """
    inputs: np.ndarray
    targets: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if inputs.ndim != 3 or targets.shape != (inputs.shape[0],):
            raise DataIOError(f"inconsistent window shapes {inputs.shape} / {targets.shape}")
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'targets', targets)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def samples(self) -> List[Tuple[np.ndarray, float]]:
        return [(window, float(target)) for window, target in zip(self.inputs, self.targets)]


def _read_frame(path: Union[str, Path], columns: Sequence[str]) -> pd.DataFrame:
    """Read the needed columns as text, then convert, so malformed cells can be located"""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"{path}: file not found")
    try:
        raw = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataIOError(f"{path}: cannot parse CSV ({e})") from e

    missing = [column for column in columns if column not in raw.columns]
    if missing:
        raise DataIOError(f"{path}: missing column(s) {', '.join(missing)}")

    frame = pd.DataFrame(index=raw.index)
    for column in columns:
        text = raw[column]
        values = pd.to_numeric(text, errors='coerce')
        malformed = values.isna() & text.notna() & (text.str.strip() != '')
        if malformed.any():
            row = int(np.flatnonzero(malformed.to_numpy())[0])
            raise DataIOError(
                f"{path}: malformed numeric value {text.iloc[row]!r} at row {row + 1}, column '{column}'"
            )
        frame[column] = values.astype(np.float64)
    return frame


def _segments(
    frame: pd.DataFrame,
    time_column: Optional[str],
    max_step: Optional[float],
    breaks: Sequence[int] = (),
) -> List[np.ndarray]:
    """Maximal runs of complete, contiguous rows (positional indices)"""
    complete = frame.notna().all(axis=1).to_numpy()
    split_before = np.zeros(len(frame), dtype=bool)
    if time_column is not None and max_step is not None:
        times = frame[time_column].to_numpy()
        steps = np.diff(times, prepend=np.nan)
        split_before |= ~(steps <= max_step)
    for position in breaks:
        if 0 <= position < len(split_before):
            split_before[position] = True

    segments = []
    current: List[int] = []
    for position in range(len(frame)):
        if not complete[position]:
            if current:
                segments.append(np.array(current))
            current = []
            continue
        if split_before[position] and current:
            segments.append(np.array(current))
            current = []
        current.append(position)
    if current:
        segments.append(np.array(current))
    return segments


def _windows(
    frame: pd.DataFrame,
    segments: List[np.ndarray],
    feature_columns: Sequence[str],
    target_column: str,
    n: int,
) -> Tuple[np.ndarray, np.ndarray]:
    features = frame[list(feature_columns)].to_numpy(dtype=np.float64)
    target = frame[target_column].to_numpy(dtype=np.float64)
    inputs, targets = [], []
    for rows in segments:
        if len(rows) <= n:
            continue
        seg_features = features[rows]
        windows = np.lib.stride_tricks.sliding_window_view(seg_features, n, axis=0)[:-1]
        # sliding_window_view puts the window axis last
        inputs.append(np.transpose(windows, (0, 2, 1)))
        targets.append(target[rows[n:]])
    if not inputs:
        return np.empty((0, n, len(feature_columns))), np.empty(0)
    return np.concatenate(inputs, axis=0), np.concatenate(targets)


def _validate_request(feature_columns: Sequence[str], n: int) -> None:
    if not feature_columns:
        raise DataIOError("at least one feature column is required")
    if n < 1:
        raise DataIOError(f"window length must be positive, got {n}")


def _used_columns(feature_columns, target_column, time_column) -> List[str]:
    columns = list(dict.fromkeys([*feature_columns, target_column]))
    if time_column is not None and time_column not in columns:
        columns.append(time_column)
    return columns


def load_csv(
    path: Union[str, Path],
    feature_columns: Sequence[str],
    target_column: str,
    n: int,
    time_column: Optional[str] = None,
    max_step: Optional[float] = None,
    split: str = 'all',
) -> WindowedDataset:
    """
    Load a CSV into sliding windows

    Rows with a missing value in any used column are dropped and break
    contiguity; with time_column/max_step, a step larger than max_step
    between consecutive rows also breaks it. Windows never span a break.

    Args:
        path: CSV file with a header row
        feature_columns: the m input columns
        target_column: column forecast one step after each window
        n: window length
        time_column: optional numeric time column for the gap rule
        max_step: largest allowed time step inside a segment
        split: provenance tag

    Returns:
        WindowedDataset
    """
    _validate_request(feature_columns, n)
    frame = _read_frame(path, _used_columns(feature_columns, target_column, time_column))
    inputs, targets = _windows(frame, _segments(frame, time_column, max_step), feature_columns, target_column, n)
    if len(targets) == 0:
        raise DataIOError(f"{path}: too few usable rows, need at least {n + 1} contiguous complete rows")

    logger.info(f"Loaded {len(targets)} windows (n={n}, m={len(feature_columns)}) from {path}")
    provenance = Provenance(str(path), tuple(feature_columns), target_column, split, n)
    return WindowedDataset(inputs, targets, provenance)


def load_csv_split(
    path: Union[str, Path],
    feature_columns: Sequence[str],
    target_column: str,
    n: int,
    boundary: Union[int, float],
    time_column: Optional[str] = None,
    max_step: Optional[float] = None,
) -> Tuple[WindowedDataset, WindowedDataset]:
    """
    Train/test windows split at a row boundary

    boundary is the first test row (0-based data row), or a fraction of
    the row count when given as a float in (0, 1). No window crosses it.
    """
    _validate_request(feature_columns, n)
    frame = _read_frame(path, _used_columns(feature_columns, target_column, time_column))
    if isinstance(boundary, float) and 0.0 < boundary < 1.0:
        boundary = int(len(frame) * boundary)
    boundary = int(boundary)
    if not 0 < boundary < len(frame):
        raise DataIOError(f"split boundary {boundary} outside the {len(frame)} data rows")

    segments = _segments(frame, time_column, max_step, breaks=(boundary,))
    train_segments = [rows for rows in segments if rows[0] < boundary]
    test_segments = [rows for rows in segments if rows[0] >= boundary]

    datasets = []
    for split, split_segments in (('train', train_segments), ('test', test_segments)):
        inputs, targets = _windows(frame, split_segments, feature_columns, target_column, n)
        if len(targets) == 0:
            raise DataIOError(f"{path}: {split} split has too few usable rows for n={n}")
        provenance = Provenance(str(path), tuple(feature_columns), target_column, split, n)
        datasets.append(WindowedDataset(inputs, targets, provenance))

    logger.info(f"Split {path} at row {boundary}: {len(datasets[0])} train / {len(datasets[1])} test windows")
    return datasets[0], datasets[1]


def load_window(path: Union[str, Path], feature_columns: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Read one inference window (rows x features) from a CSV

    Uses every column when feature_columns is not given; rows with a
    missing value are dropped.
    """
    if feature_columns is None:
        path = Path(path)
        if not path.is_file():
            raise DataIOError(f"{path}: file not found")
        try:
            feature_columns = list(pd.read_csv(path, nrows=0).columns)
        except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
            raise DataIOError(f"{path}: cannot parse CSV ({e})") from e
    frame = _read_frame(path, list(feature_columns)).dropna()
    return frame[list(feature_columns)].to_numpy(dtype=np.float64)


class MinMaxScaler:
    """
    Per-feature MinMax normalization to [0, 1]

    Backed by scikit-learn's MinMaxScaler. A constant feature maps to 0.
    """

    def __init__(self):
        self._scaler: Optional[SklearnMinMaxScaler] = None

    @classmethod
    def from_bounds(cls, data_min, data_max) -> 'MinMaxScaler':
        """Restore a fitted scaler from stored per-feature bounds"""
        data_min = np.atleast_1d(np.asarray(data_min, dtype=np.float64))
        data_max = np.atleast_1d(np.asarray(data_max, dtype=np.float64))
        if data_min.shape != data_max.shape or np.any(data_max < data_min):
            raise DataIOError("scaler bounds must be paired vectors with max >= min")
        return cls().fit(np.vstack([data_min, data_max]))

    @property
    def fitted(self) -> bool:
        return self._scaler is not None

    @property
    def data_min(self) -> np.ndarray:
        self._require_fitted()
        return self._scaler.data_min_.copy()

    @property
    def data_max(self) -> np.ndarray:
        self._require_fitted()
        return self._scaler.data_max_.copy()

    @property
    def degenerate(self) -> np.ndarray:
        """Per-feature flag for constant features"""
        return self.data_max == self.data_min

    def _require_fitted(self) -> None:
        if self._scaler is None:
            raise DataIOError("scaler is not fitted")

    @staticmethod
    def _as_2d(data) -> np.ndarray:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            return arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise DataIOError(f"scaler expects (rows x features) data, got shape {arr.shape}")
        return arr

    def fit(self, data) -> 'MinMaxScaler':
        arr = self._as_2d(data)
        if arr.shape[0] == 0:
            raise DataIOError("cannot fit a scaler on empty data")
        if not np.all(np.isfinite(arr)):
            raise DataIOError("cannot fit a scaler on non-finite data")
        self._scaler = SklearnMinMaxScaler(feature_range=(0, 1)).fit(arr)
        return self

    def transform(self, data) -> np.ndarray:
        """Map to [0, 1] on the fitted range; features constant at fit time map to 0"""
        self._require_fitted()
        arr = np.asarray(data, dtype=np.float64)
        scaled = self._scaler.transform(self._as_2d(arr))
        scaled[:, self.degenerate] = 0.0
        return scaled.reshape(arr.shape)

    def fit_transform(self, data) -> np.ndarray:
        return self.fit(data).transform(data)

    def inverse_transform(self, data) -> np.ndarray:
        self._require_fitted()
        arr = np.asarray(data, dtype=np.float64)
        return self._scaler.inverse_transform(self._as_2d(arr)).reshape(arr.shape)


@dataclass
class DatasetScalers:
    """Feature and target scalers fitted on the training split"""
    features: MinMaxScaler = field(default_factory=MinMaxScaler)
    target: MinMaxScaler = field(default_factory=MinMaxScaler)

    @classmethod
    def fit(cls, train: WindowedDataset) -> 'DatasetScalers':
        m = train.inputs.shape[2]
        scalers = cls()
        scalers.features.fit(train.inputs.reshape(-1, m))
        scalers.target.fit(train.targets.reshape(-1, 1))
        return scalers

    def transform(self, dataset: WindowedDataset) -> WindowedDataset:
        m = dataset.inputs.shape[2]
        inputs = self.features.transform(dataset.inputs.reshape(-1, m)).reshape(dataset.inputs.shape)
        targets = self.target.transform(dataset.targets.reshape(-1, 1)).reshape(-1)
        return replace(dataset, inputs=inputs, targets=targets)

    def inverse_target(self, values) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64)
        return self.target.inverse_transform(arr.reshape(-1, 1)).reshape(arr.shape)


def rmse(predictions, targets) -> float:
    """sqrt(mean((p - t)^2))"""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0 or t.size == 0:
        raise DataIOError("RMSE needs at least one prediction")
    if p.size != t.size:
        raise DataIOError(f"RMSE length mismatch: {p.size} predictions vs {t.size} targets")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise DataIOError("RMSE inputs must be finite")
    return float(np.sqrt(np.mean((p - t) ** 2)))
