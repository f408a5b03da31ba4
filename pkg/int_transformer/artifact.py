"""
Model artifact format
A directory holding manifest.txt ("key = value" records) and one
<tensor>.txt file per integer tensor, newline-delimited decimal integers
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ArtifactError, IntTransformerError
from .qcore import FixedScale, IntTensor, QParams
from .kernels import BatchNormParams, LinearParams, PETable, SoftmaxTables
from .model import (
    BATCHNORM_LAYERS,
    EDGES,
    LINEAR_FIELDS,
    LINEAR_INPUT_EDGE,
    LINEAR_LAYERS,
    BATCHNORM_INPUT_EDGE,
    SCALE_SITES,
    ModelConfig,
    QuantizedModel,
)
from .dataio import DatasetScalers, MinMaxScaler

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.txt'


@dataclass(frozen=True, eq=False)
class ModelArtifact:
    """A loaded artifact: the model plus optional dataset column mapping and fitted scalers"""
    model: QuantizedModel
    scalers: Optional[DatasetScalers] = None
    feature_columns: Tuple[str, ...] = ()
    target_column: Optional[str] = None


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _fmt_vector(values) -> str:
    return ','.join(_fmt(float(v)) for v in np.asarray(values).reshape(-1))


class _ManifestWriter:
    def __init__(self):
        self.lines: List[str] = []
        self.tensors: Dict[str, np.ndarray] = {}

    def put(self, key: str, value) -> None:
        self.lines.append(f"{key} = {value}")

    def qparams(self, prefix: str, qp: QParams) -> None:
        self.put(f"{prefix}.scale", _fmt(qp.scale))
        self.put(f"{prefix}.zero_point", qp.zero_point)
        self.put(f"{prefix}.bitwidth", qp.bitwidth)
        self.put(f"{prefix}.constant", int(qp.constant))

    def fixed_scale(self, prefix: str, fs: FixedScale) -> None:
        self.put(f"{prefix}.multiplier", fs.multiplier)
        self.put(f"{prefix}.shift", fs.shift)
        self.put(f"{prefix}.ratio", _fmt(fs.ratio))
        self.put(f"{prefix}.width", fs.width)

    def tensor(self, name: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.int64)
        self.put(f"tensor.{name}.shape", 'x'.join(str(dim) for dim in values.shape))
        self.put(f"tensor.{name}.count", values.size)
        self.tensors[name] = values


def _describe_model(writer: _ManifestWriter, model: QuantizedModel) -> None:
    cfg = model.config
    for key, value in cfg.as_dict().items():
        writer.put(f"config.{key}", value)
    writer.put('edges', ','.join(EDGES))

    for edge in EDGES:
        writer.qparams(f"edge.{edge}", model.edge_qparams[edge])
    for site in SCALE_SITES:
        writer.fixed_scale(f"scale.{site}", model.edge_scales[site])

    for layer in LINEAR_LAYERS:
        params = model.linear(layer)
        writer.qparams(f"{layer}.weight_qparams", params.weights.qparams)
        writer.fixed_scale(f"{layer}.requant", params.requant)
        writer.tensor(f"{layer}.weight", params.weights.data)
        writer.tensor(f"{layer}.bias", params.bias_q)

    for layer in BATCHNORM_LAYERS:
        params = model.batchnorm(layer)
        writer.qparams(f"{layer}.gamma_qparams", params.gamma_hat_q.qparams)
        writer.fixed_scale(f"{layer}.requant", params.requant)
        writer.tensor(f"{layer}.gamma", params.gamma_hat_q.data)
        writer.tensor(f"{layer}.beta", params.beta_star_q)

    writer.tensor('pe.table', model.pe.table.data)

    tables = model.softmax_tables
    writer.put('softmax.z_e', tables.z_e)
    writer.put('softmax.s_e', _fmt(tables.s_e))
    writer.put('softmax.n', tables.n)
    writer.put('softmax.h', tables.h)
    writer.put('softmax.exp_argument', tables.exp_argument)
    writer.put('softmax.policy', tables.policy)
    writer.tensor('softmax.nlut', tables.nlut)
    writer.tensor('softmax.dlut', tables.dlut)


def save_model(
    path: Union[str, Path],
    model: QuantizedModel,
    scalers: Optional[DatasetScalers] = None,
    feature_columns: Tuple[str, ...] = (),
    target_column: Optional[str] = None,
) -> Path:
    """
    Write a model artifact directory

    Args:
        path: artifact directory (created if needed)
        model: assembled model
        scalers: fitted dataset scalers, stored so inference can inverse-transform
        feature_columns: dataset column mapping for the m inputs
        target_column: dataset target column

    Returns:
        The artifact directory
    """
    root = Path(path)
    writer = _ManifestWriter()
    writer.put('format_version', FORMAT_VERSION)
    _describe_model(writer, model)

    if feature_columns:
        writer.put('dataset.features', ','.join(feature_columns))
    if target_column:
        writer.put('dataset.target', target_column)
    if scalers is not None and scalers.features.fitted and scalers.target.fitted:
        writer.put('scaler.features.min', _fmt_vector(scalers.features.data_min))
        writer.put('scaler.features.max', _fmt_vector(scalers.features.data_max))
        writer.put('scaler.target.min', _fmt_vector(scalers.target.data_min))
        writer.put('scaler.target.max', _fmt_vector(scalers.target.data_max))

    writer.put('tensors', ','.join(writer.tensors))

    try:
        root.mkdir(parents=True, exist_ok=True)
        for name, values in writer.tensors.items():
            text = ''.join(f"{int(v)}\n" for v in values.reshape(-1))
            (root / f"{name}.txt").write_text(text)
        (root / MANIFEST_NAME).write_text('\n'.join(writer.lines) + '\n')
    except OSError as e:
        raise ArtifactError(f"cannot write artifact {root}: {e}") from e

    logger.info(f"Saved model artifact to {root} ({len(writer.tensors)} tensors)")
    return root


class _Manifest:
    def __init__(self, root: Path, entries: Dict[str, str]):
        self.root = root
        self.entries = entries

    def get(self, key: str) -> str:
        try:
            return self.entries[key]
        except KeyError:
            raise ArtifactError(f"{self.root}: manifest has no '{key}' entry") from None

    def optional(self, key: str) -> Optional[str]:
        return self.entries.get(key)

    def integer(self, key: str) -> int:
        try:
            return int(self.get(key))
        except ValueError:
            raise ArtifactError(f"{self.root}: manifest entry '{key}' is not an integer") from None

    def real(self, key: str) -> float:
        try:
            return float(self.get(key))
        except ValueError:
            raise ArtifactError(f"{self.root}: manifest entry '{key}' is not a number") from None

    def qparams(self, prefix: str) -> QParams:
        return QParams(
            self.real(f"{prefix}.scale"),
            self.integer(f"{prefix}.zero_point"),
            self.integer(f"{prefix}.bitwidth"),
            bool(self.integer(f"{prefix}.constant")),
        )

    def fixed_scale(self, prefix: str) -> FixedScale:
        return FixedScale(
            self.integer(f"{prefix}.multiplier"),
            self.integer(f"{prefix}.shift"),
            self.real(f"{prefix}.ratio"),
            self.integer(f"{prefix}.width"),
        )

    def tensor(self, name: str) -> np.ndarray:
        shape_text = self.get(f"tensor.{name}.shape")
        shape = tuple(int(dim) for dim in shape_text.split('x')) if shape_text else ()
        count = self.integer(f"tensor.{name}.count")
        file_path = self.root / f"{name}.txt"
        if not file_path.is_file():
            raise ArtifactError(f"{self.root}: tensor file for '{name}' is missing")
        lines = [line for line in file_path.read_text().splitlines() if line.strip()]
        if len(lines) != count:
            raise ArtifactError(f"tensor '{name}' holds {len(lines)} values, manifest declares {count}")
        try:
            values = np.array([int(line) for line in lines], dtype=np.int64)
        except ValueError:
            raise ArtifactError(f"tensor '{name}' contains a non-integer line") from None
        return values.reshape(shape)

    def vector(self, key: str) -> np.ndarray:
        return np.array([float(v) for v in self.get(key).split(',')], dtype=np.float64)


def _read_manifest(root: Path) -> _Manifest:
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ArtifactError(f"{root}: no {MANIFEST_NAME} found")
    entries = {}
    for number, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition(' = ')
        if not sep:
            raise ArtifactError(f"{manifest_path}:{number}: expected 'key = value'")
        entries[key.strip()] = value.strip()

    manifest = _Manifest(root, entries)
    version = manifest.integer('format_version')
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{root}: unsupported artifact format version {version} (expected {FORMAT_VERSION})")
    return manifest


def _build_model(manifest: _Manifest) -> QuantizedModel:
    cfg = ModelConfig(**{key: manifest.integer(f"config.{key}") for key in ('n', 'm', 'd_model', 'b', 'h')})
    edge_qp = {edge: manifest.qparams(f"edge.{edge}") for edge in EDGES}
    edge_scales = {site: manifest.fixed_scale(f"scale.{site}") for site in SCALE_SITES}

    fields = {}
    for layer in LINEAR_LAYERS:
        fields[LINEAR_FIELDS[layer]] = LinearParams(
            weights=IntTensor(manifest.tensor(f"{layer}.weight"), manifest.qparams(f"{layer}.weight_qparams")),
            bias_q=manifest.tensor(f"{layer}.bias"),
            requant=manifest.fixed_scale(f"{layer}.requant"),
            in_qp=edge_qp[LINEAR_INPUT_EDGE[layer]],
            out_qp=edge_qp[layer],
        )
    for layer in BATCHNORM_LAYERS:
        fields[layer] = BatchNormParams(
            gamma_hat_q=IntTensor(manifest.tensor(f"{layer}.gamma"), manifest.qparams(f"{layer}.gamma_qparams")),
            beta_star_q=manifest.tensor(f"{layer}.beta"),
            requant=manifest.fixed_scale(f"{layer}.requant"),
            in_qp=edge_qp[BATCHNORM_INPUT_EDGE[layer]],
            out_qp=edge_qp[layer],
        )

    tables = SoftmaxTables(
        nlut=manifest.tensor('softmax.nlut'),
        dlut=manifest.tensor('softmax.dlut'),
        z_e=manifest.integer('softmax.z_e'),
        s_e=manifest.real('softmax.s_e'),
        in_qp=edge_qp['score'],
        out_qp=edge_qp['softmax'],
        n=manifest.integer('softmax.n'),
        h=manifest.integer('softmax.h'),
        exp_argument=manifest.get('softmax.exp_argument'),
        policy=manifest.get('softmax.policy'),
    )

    return QuantizedModel(
        config=cfg,
        pe=PETable(IntTensor(manifest.tensor('pe.table'), edge_qp['pe'])),
        softmax_tables=tables,
        edge_qparams=edge_qp,
        edge_scales=edge_scales,
        **fields,
    )


def _build_scalers(manifest: _Manifest) -> Optional[DatasetScalers]:
    if manifest.optional('scaler.features.min') is None:
        return None
    return DatasetScalers(
        features=MinMaxScaler.from_bounds(
            manifest.vector('scaler.features.min'), manifest.vector('scaler.features.max')
        ),
        target=MinMaxScaler.from_bounds(manifest.vector('scaler.target.min'), manifest.vector('scaler.target.max')),
    )


def load_artifact(path: Union[str, Path]) -> ModelArtifact:
    """Read an artifact directory back into a model, its scalers and column mapping"""
    root = Path(path)
    manifest = _read_manifest(root)
    try:
        model = _build_model(manifest)
        scalers = _build_scalers(manifest)
    except ArtifactError:
        raise
    except (IntTransformerError, ValueError) as e:
        raise ArtifactError(f"{root}: inconsistent artifact ({e})") from e

    features = manifest.optional('dataset.features')
    logger.info(f"Loaded model artifact from {root}")
    return ModelArtifact(
        model=model,
        scalers=scalers,
        feature_columns=tuple(features.split(',')) if features else (),
        target_column=manifest.optional('dataset.target'),
    )


def load_model(path: Union[str, Path]) -> QuantizedModel:
    return load_artifact(path).model
