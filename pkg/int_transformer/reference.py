"""
Reference oracles
Float forward pass for precision baselines, activation calibration capture,
and a rounding-identical simulated-quantization forward pass built on
exact rational arithmetic for bit-exact differential testing
"""

import json
import math
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CalibrationError, ConfigError, ForwardError
from .qcore import DEFAULT_SCALE_WIDTH, FixedScale, IntTensor, Observer, quantize
from .kernels import sinusoidal_encoding
from .model import (
    BATCHNORM_LAYERS,
    EDGES,
    ModelConfig,
    QuantizedModel,
    assemble,
    linear_shapes,
)

logger = logging.getLogger(__name__)

FLOAT_MODEL_FORMAT_VERSION = 1
RESCALE_ROUNDINGS = ('half_away', 'truncate')

EdgeObserver = Callable[[str, np.ndarray], None]


@dataclass(frozen=True, eq=False)
class DenseWeights:
    """Real weight matrix (out_dim x in_dim) and bias vector"""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'weight', np.array(self.weight, dtype=np.float64))
        object.__setattr__(self, 'bias', np.array(self.bias, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class BatchNormStats:
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ('gamma', 'beta', 'mu', 'sigma2'):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, 'eps', float(self.eps))


@dataclass(frozen=True, eq=False)
class FloatModel:
    """Real-valued weights for every linear layer plus the two BatchNorm layers"""
    config: ModelConfig
    linears: Dict[str, DenseWeights]
    batchnorms: Dict[str, BatchNormStats]

    def __post_init__(self):
        for layer, shape in linear_shapes(self.config).items():
            dense = self.linears.get(layer)
            if dense is None:
                raise ConfigError(f"float model is missing linear layer '{layer}'")
            if dense.weight.shape != shape or dense.bias.shape != (shape[0],):
                raise ConfigError(
                    f"linear layer '{layer}' has shapes {dense.weight.shape}/{dense.bias.shape}, expected {shape}"
                )
        for layer in BATCHNORM_LAYERS:
            stats = self.batchnorms.get(layer)
            if stats is None:
                raise ConfigError(f"float model is missing BatchNorm layer '{layer}'")
            for name in ('gamma', 'beta', 'mu', 'sigma2'):
                if getattr(stats, name).shape != (self.config.d_model,):
                    raise ConfigError(f"BatchNorm '{layer}' {name} must have length {self.config.d_model}")

    @classmethod
    def random(cls, cfg: ModelConfig, seed: Union[int, np.random.Generator]) -> 'FloatModel':
        """
        Seeded random weights

        Linear layers draw U(-1/sqrt(in_dim), 1/sqrt(in_dim)); BatchNorm draws
        gamma in [0.5, 1.5], beta in [-0.5, 0.5], mu in [-0.5, 0.5] and
        sigma2 in [0.5, 2]. The draws depend on (n, m, d_model) and the
        seed only, never on the bitwidth.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        linears = {}
        for layer, (out_dim, in_dim) in linear_shapes(cfg).items():
            bound = 1.0 / math.sqrt(in_dim)
            linears[layer] = DenseWeights(
                weight=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
                bias=rng.uniform(-bound, bound, size=out_dim),
            )
        batchnorms = {}
        d = cfg.d_model
        for layer in BATCHNORM_LAYERS:
            batchnorms[layer] = BatchNormStats(
                gamma=rng.uniform(0.5, 1.5, size=d),
                beta=rng.uniform(-0.5, 0.5, size=d),
                mu=rng.uniform(-0.5, 0.5, size=d),
                sigma2=rng.uniform(0.5, 2.0, size=d),
            )
        return cls(cfg, linears, batchnorms)

    @classmethod
    def zeros(cls, cfg: ModelConfig, output_bias: float = 0.0) -> 'FloatModel':
        """All-zero weights and biases with identity BatchNorm; only the output bias is settable"""
        linears = {
            layer: DenseWeights(np.zeros(shape), np.zeros(shape[0]))
            for layer, shape in linear_shapes(cfg).items()
        }
        linears['output'] = DenseWeights(np.zeros((1, cfg.d_model)), np.array([output_bias]))
        d = cfg.d_model
        batchnorms = {
            layer: BatchNormStats(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d))
            for layer in BATCHNORM_LAYERS
        }
        return cls(cfg, linears, batchnorms)

    def to_dict(self) -> Dict:
        return {
            'format_version': FLOAT_MODEL_FORMAT_VERSION,
            'config': self.config.as_dict(),
            'linears': {
                layer: {'weight': dense.weight.tolist(), 'bias': dense.bias.tolist()}
                for layer, dense in self.linears.items()
            },
            'batchnorms': {
                layer: {
                    'gamma': stats.gamma.tolist(),
                    'beta': stats.beta.tolist(),
                    'mu': stats.mu.tolist(),
                    'sigma2': stats.sigma2.tolist(),
                    'eps': stats.eps,
                }
                for layer, stats in self.batchnorms.items()
            },
        }

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, data: Dict, bitwidth: Optional[int] = None) -> 'FloatModel':
        version = data.get('format_version')
        if version != FLOAT_MODEL_FORMAT_VERSION:
            raise ConfigError(f"unsupported float weight format version {version!r}")
        try:
            config = dict(data['config'])
            if bitwidth is not None:
                config['b'] = bitwidth
            cfg = ModelConfig(**config)
            linears = {
                layer: DenseWeights(entry['weight'], entry['bias'])
                for layer, entry in data['linears'].items()
            }
            batchnorms = {
                layer: BatchNormStats(
                    entry['gamma'], entry['beta'], entry['mu'], entry['sigma2'], entry.get('eps', 1e-5)
                )
                for layer, entry in data['batchnorms'].items()
            }
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed float weight file: {e}") from e
        return cls(cfg, linears, batchnorms)

    @classmethod
    def from_json(cls, path: Union[str, Path], bitwidth: Optional[int] = None) -> 'FloatModel':
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data, bitwidth)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _batchnorm(x: np.ndarray, stats: BatchNormStats) -> np.ndarray:
    return stats.gamma * (x - stats.mu) / np.sqrt(stats.sigma2 + stats.eps) + stats.beta


def float_forward(fm: FloatModel, x, observe: Optional[EdgeObserver] = None) -> float:
    """
    Float64 execution of the encoder graph

    Args:
        fm: float model
        x: real (n x m) input window
        observe: optional callback receiving (edge, values) for every edge

    Returns:
        Scalar forecast
    """
    cfg = fm.config
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.n, cfg.m):
        raise ForwardError('input', f"expected shape ({cfg.n}, {cfg.m}), got {x.shape}")

    def emit(edge: str, values: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(values)):
            raise ForwardError(edge, "non-finite values in float forward pass")
        if observe is not None:
            observe(edge, values)
        return values

    def linear(layer: str, values: np.ndarray) -> np.ndarray:
        dense = fm.linears[layer]
        return emit(layer, values @ dense.weight.T + dense.bias)

    emit('input', x)
    l_input = linear('l_input', x)
    pe = emit('pe', sinusoidal_encoding(cfg.n, cfg.d_model))
    add_pe = emit('add_pe', l_input + pe)
    q = linear('q', add_pe)
    k = linear('k', add_pe)
    v = linear('v', add_pe)
    score = emit('score', q @ k.T / math.sqrt(cfg.d_model / cfg.h))
    softmax = emit('softmax', _softmax_rows(score))
    attn = emit('attn', softmax @ v)
    l_o = linear('l_o', attn)
    add_mha = emit('add_mha', l_o + add_pe)
    bn_mha = emit('bn_mha', _batchnorm(add_mha, fm.batchnorms['bn_mha']))
    ffn1 = linear('ffn1', bn_mha)
    relu = emit('relu', np.maximum(ffn1, 0.0))
    ffn2 = linear('ffn2', relu)
    add_ffn = emit('add_ffn', ffn2 + bn_mha)
    bn_ffn = emit('bn_ffn', _batchnorm(add_ffn, fm.batchnorms['bn_ffn']))
    gap = emit('gap', bn_ffn.mean(axis=0, keepdims=True))
    output = linear('output', gap)
    return float(output[0, 0])


@dataclass
class CalibrationRecord:
    """Per-edge observers filled by calibrate_model"""
    observers: Dict[str, Observer] = field(default_factory=dict)

    def update(self, edge: str, values: np.ndarray) -> None:
        self.observers.setdefault(edge, Observer()).update(values)

    def missing_edges(self, required: Sequence[str] = EDGES) -> List[str]:
        return [edge for edge in required if edge not in self.observers or not self.observers[edge].seen]

    def covers(self, required: Sequence[str] = EDGES) -> bool:
        return not self.missing_edges(required)

    def interval(self, edge: str) -> Tuple[float, float]:
        observer = self.observers[edge]
        return observer.running_min, observer.running_max


def calibrate_model(fm: FloatModel, calib_inputs) -> CalibrationRecord:
    """Run float_forward over a batch (samples x n x m), tracking min/max on every edge"""
    batch = np.asarray(calib_inputs, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[np.newaxis]
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise CalibrationError("calibration needs at least one (n x m) sample")

    record = CalibrationRecord()
    for sample in batch:
        float_forward(fm, sample, observe=record.update)
    logger.debug(f"Calibrated {len(record.observers)} edges over {batch.shape[0]} samples")
    return record


def _round_half_away(value: Fraction) -> int:
    magnitude = math.floor(abs(value) + Fraction(1, 2))
    return magnitude if value >= 0 else -magnitude


def _clamp(value: int, bits: int) -> int:
    lo = -(1 << (bits - 1))
    hi = (1 << (bits - 1)) - 1
    return lo if value < lo else hi if value > hi else value


def _to_lists(values) -> List:
    return np.asarray(values).tolist()


class _ExactPipeline:
    """Python-integer re-derivation of every integer layer"""

    def __init__(self, qm: QuantizedModel, rescale_rounding: str):
        if rescale_rounding not in RESCALE_ROUNDINGS:
            raise ConfigError(f"rescale_rounding must be one of {RESCALE_ROUNDINGS}, got {rescale_rounding!r}")
        self.qm = qm
        self.rescale_rounding = rescale_rounding
        self.b = qm.config.b

    def rescale(self, value: int, fs: FixedScale) -> int:
        exact = Fraction(value * fs.multiplier, 1 << fs.shift)
        if self.rescale_rounding == 'truncate':
            return int(exact)
        return _round_half_away(exact)

    def finish(self, acc: int, fs: FixedScale, zero_point: int) -> int:
        return _clamp(self.rescale(acc, fs) + zero_point, self.b)

    def linear(self, layer: str, x: List[List[int]]) -> List[List[int]]:
        params = self.qm.linear(layer)
        z_w = params.weights.qparams.zero_point
        z_x = params.in_qp.zero_point
        z_a = params.out_qp.zero_point
        weights = [[w - z_w for w in row] for row in _to_lists(params.weights.data)]
        bias = _to_lists(params.bias_q)
        out = []
        for row in x:
            centered = [v - z_x for v in row]
            out.append([
                self.finish(sum(w * v for w, v in zip(w_row, centered)) + bias[o], params.requant, z_a)
                for o, w_row in enumerate(weights)
            ])
        return out

    def add(self, lhs: List[List[int]], rhs: List[List[int]], site: str, lhs_edge: str, rhs_edge: str,
            out_edge: str) -> List[List[int]]:
        qp = self.qm.edge_qparams
        fs_l = self.qm.edge_scales[f"{site}.lhs"]
        fs_r = self.qm.edge_scales[f"{site}.rhs"]
        z_l, z_r, z_o = qp[lhs_edge].zero_point, qp[rhs_edge].zero_point, qp[out_edge].zero_point
        return [
            [_clamp(self.rescale(a - z_l, fs_l) + self.rescale(c - z_r, fs_r) + z_o, self.b) for a, c in zip(ra, rc)]
            for ra, rc in zip(lhs, rhs)
        ]

    def matmul(self, lhs: List[List[int]], rhs: List[List[int]], rhs_by_rows: bool, fs: FixedScale,
               z_l: int, z_r: int, z_o: int) -> List[List[int]]:
        """rhs_by_rows contracts lhs rows with rhs rows (lhs @ rhs^T)"""
        columns = rhs if rhs_by_rows else [list(col) for col in zip(*rhs)]
        columns = [[v - z_r for v in col] for col in columns]
        out = []
        for row in lhs:
            centered = [v - z_l for v in row]
            out.append([self.finish(sum(a * c for a, c in zip(centered, col)), fs, z_o) for col in columns])
        return out

    def softmax(self, scores: List[List[int]]) -> List[List[int]]:
        tables = self.qm.softmax_tables
        nlut = _to_lists(tables.nlut)
        dlut = _to_lists(tables.dlut)
        offset = (1 << self.b) - 1
        z_a = tables.out_qp.zero_point
        out = []
        for i, row in enumerate(scores):
            peak = max(row)
            indices = [v - peak + offset for v in row]
            total = sum(dlut[idx] - tables.z_e for idx in indices)
            if total <= 0:
                raise ForwardError('softmax', f"row {i} has a non-positive denominator sum {total}")
            out.append([_clamp(int(Fraction(nlut[idx], total)) + z_a, self.b) for idx in indices])
        return out

    def batchnorm(self, layer: str, x: List[List[int]]) -> List[List[int]]:
        params = self.qm.batchnorm(layer)
        z_g = params.gamma_hat_q.qparams.zero_point
        gammas = [g - z_g for g in _to_lists(params.gamma_hat_q.data)]
        betas = _to_lists(params.beta_star_q)
        z_x = params.in_qp.zero_point
        z_a = params.out_qp.zero_point
        return [
            [self.finish(g * (v - z_x) + beta, params.requant, z_a) for g, v, beta in zip(gammas, row, betas)]
            for row in x
        ]

    def gap(self, x: List[List[int]]) -> List[List[int]]:
        qp = self.qm.edge_qparams
        z_x = qp['bn_ffn'].zero_point
        fs = self.qm.edge_scales['gap']
        sums = [sum(v - z_x for v in col) for col in zip(*x)]
        return [[self.finish(total, fs, qp['gap'].zero_point) for total in sums]]


def sim_quant_forward(qm: QuantizedModel, x_q: IntTensor, rescale_rounding: str = 'half_away') -> Dict[str, np.ndarray]:
    """
    Exact-arithmetic re-derivation of the integer forward pass

    Every requantization is evaluated as a Fraction and rounded half away
    from zero, division truncates toward zero, and every edge is clamped
    to b bits. rescale_rounding='truncate' swaps the requantization
    rounding for truncation.

    Returns:
        Edge name -> int64 array, in execution order
    """
    cfg = qm.config
    qp = qm.edge_qparams
    data = np.asarray(x_q.data)
    if data.shape != (cfg.n, cfg.m):
        raise ForwardError('input', f"expected shape ({cfg.n}, {cfg.m}), got {data.shape}")

    pipe = _ExactPipeline(qm, rescale_rounding)
    fs = qm.edge_scales
    edges: Dict[str, List[List[int]]] = {'input': _to_lists(data)}
    edges['l_input'] = pipe.linear('l_input', edges['input'])
    edges['pe'] = _to_lists(qm.pe.table.data)
    edges['add_pe'] = pipe.add(edges['l_input'], edges['pe'], 'add_pe', 'l_input', 'pe', 'add_pe')
    for layer in ('q', 'k', 'v'):
        edges[layer] = pipe.linear(layer, edges['add_pe'])
    edges['score'] = pipe.matmul(
        edges['q'], edges['k'], True, fs['score'],
        qp['q'].zero_point, qp['k'].zero_point, qp['score'].zero_point,
    )
    edges['softmax'] = pipe.softmax(edges['score'])
    edges['attn'] = pipe.matmul(
        edges['softmax'], edges['v'], False, fs['attn'],
        qp['softmax'].zero_point, qp['v'].zero_point, qp['attn'].zero_point,
    )
    edges['l_o'] = pipe.linear('l_o', edges['attn'])
    edges['add_mha'] = pipe.add(edges['l_o'], edges['add_pe'], 'add_mha', 'l_o', 'add_pe', 'add_mha')
    edges['bn_mha'] = pipe.batchnorm('bn_mha', edges['add_mha'])
    edges['ffn1'] = pipe.linear('ffn1', edges['bn_mha'])
    z_relu = qp['relu'].zero_point
    edges['relu'] = [[max(v, z_relu) for v in row] for row in edges['ffn1']]
    edges['ffn2'] = pipe.linear('ffn2', edges['relu'])
    edges['add_ffn'] = pipe.add(edges['ffn2'], edges['bn_mha'], 'add_ffn', 'ffn2', 'bn_mha', 'add_ffn')
    edges['bn_ffn'] = pipe.batchnorm('bn_ffn', edges['add_ffn'])
    edges['gap'] = pipe.gap(edges['bn_ffn'])
    edges['output'] = pipe.linear('output', edges['gap'])

    return {edge: np.array(edges[edge], dtype=np.int64) for edge in EDGES}


@dataclass(frozen=True)
class EdgeMismatch:
    edge: str
    index: Optional[Tuple[int, ...]]
    engine_value: Optional[int]
    oracle_value: Optional[int]

    def describe(self) -> str:
        if self.index is None:
            return f"edge {self.edge}: shapes or presence differ"
        return f"edge {self.edge} at {self.index}: engine={self.engine_value} oracle={self.oracle_value}"


def _edge_values(value) -> np.ndarray:
    if isinstance(value, IntTensor):
        value = value.data
    return np.asarray(value, dtype=np.int64)


def first_mismatch(engine_edges: Dict, oracle_edges: Dict) -> Optional[EdgeMismatch]:
    """First edge (execution order) and element where the two edge maps disagree, None when identical"""
    for edge in EDGES:
        if edge not in engine_edges or edge not in oracle_edges:
            if edge in engine_edges or edge in oracle_edges:
                return EdgeMismatch(edge, None, None, None)
            continue
        engine = _edge_values(engine_edges[edge])
        oracle = _edge_values(oracle_edges[edge])
        if engine.shape != oracle.shape:
            return EdgeMismatch(edge, None, None, None)
        differs = engine != oracle
        if np.any(differs):
            index = tuple(int(i) for i in np.argwhere(differs)[0])
            return EdgeMismatch(edge, index, int(engine[index]), int(oracle[index]))
    return None


@dataclass(frozen=True, eq=False)
class RandomInstance:
    """Seeded float model, its calibration record and assembled model, plus one input window"""
    float_model: FloatModel
    record: CalibrationRecord
    model: QuantizedModel
    x: np.ndarray
    x_q: IntTensor


def build_random_instance(
    cfg: ModelConfig,
    seed: int,
    calibration_samples: int = 8,
    scale_width: int = DEFAULT_SCALE_WIDTH,
    exp_argument: str = 'scaled',
    softmax_policy: str = 'fit',
) -> RandomInstance:
    """
    Random weights plus a calibration batch of MinMax-range windows

    The evaluated window is part of the calibration batch, so its own
    activations never clamp at an edge.
    """
    rng = np.random.default_rng(seed)
    fm = FloatModel.random(cfg, rng)
    x = rng.uniform(0.0, 1.0, size=(cfg.n, cfg.m))
    batch = rng.uniform(0.0, 1.0, size=(calibration_samples, cfg.n, cfg.m))
    record = calibrate_model(fm, np.concatenate([batch, x[np.newaxis]], axis=0))
    model = assemble(
        cfg, fm, record, scale_width=scale_width, exp_argument=exp_argument, softmax_policy=softmax_policy
    )
    return RandomInstance(fm, record, model, x, quantize(x, model.edge_qparams['input']))
