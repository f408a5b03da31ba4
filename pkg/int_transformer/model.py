"""
Integer encoder pipeline
Model configuration, parameter counting, assembly of quantized parameters
from a float model plus calibration statistics, and the integer forward pass
"""

import math
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Tuple

import numpy as np

from .errors import CalibrationError, ConfigError, ForwardError, KernelError, QuantizationError
from .qcore import (
    DEFAULT_SCALE_WIDTH,
    SUPPORTED_BITWIDTHS,
    FixedScale,
    IntTensor,
    Observer,
    QParams,
    calibrate,
    dequantize,
    derive_fixed_scale,
    quantize,
    quantize_bias,
)
from .kernels import (
    BatchNormParams,
    LinearParams,
    PETable,
    SoftmaxTables,
    build_pe_table,
    build_softmax_tables,
    fold_batchnorm,
    int_add,
    int_batchnorm,
    int_gap,
    int_linear,
    int_matmul,
    int_relu,
    int_softmax,
)

if TYPE_CHECKING:
    from .reference import CalibrationRecord, FloatModel

logger = logging.getLogger(__name__)

# Inter-layer activations in execution order
EDGES = (
    'input', 'l_input', 'pe', 'add_pe', 'q', 'k', 'v', 'score', 'softmax', 'attn',
    'l_o', 'add_mha', 'bn_mha', 'ffn1', 'relu', 'ffn2', 'add_ffn', 'bn_ffn', 'gap', 'output',
)
# pe carries the table's own qparams, relu shares ffn1's
CALIBRATED_EDGES = tuple(edge for edge in EDGES if edge not in ('pe', 'relu'))

LINEAR_LAYERS = ('l_input', 'q', 'k', 'v', 'l_o', 'ffn1', 'ffn2', 'output')
LINEAR_INPUT_EDGE = {
    'l_input': 'input',
    'q': 'add_pe',
    'k': 'add_pe',
    'v': 'add_pe',
    'l_o': 'attn',
    'ffn1': 'bn_mha',
    'ffn2': 'relu',
    'output': 'gap',
}
LINEAR_FIELDS = {
    'l_input': 'input_linear',
    'q': 'q_linear',
    'k': 'k_linear',
    'v': 'v_linear',
    'l_o': 'o_linear',
    'ffn1': 'ffn1',
    'ffn2': 'ffn2',
    'output': 'output_linear',
}
BATCHNORM_LAYERS = ('bn_mha', 'bn_ffn')
BATCHNORM_INPUT_EDGE = {'bn_mha': 'add_mha', 'bn_ffn': 'add_ffn'}

SCALE_SITES = (
    'add_pe.lhs', 'add_pe.rhs', 'score', 'attn',
    'add_mha.lhs', 'add_mha.rhs', 'add_ffn.lhs', 'add_ffn.rhs', 'gap',
)


@dataclass(frozen=True)
class ModelConfig:
    """Single-layer encoder dimensions: n timesteps, m features, d_model, bitwidth b"""
    n: int
    m: int
    d_model: int
    b: int
    h: int = 1

    def __post_init__(self):
        for name in ('n', 'm', 'd_model', 'b', 'h'):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.h != 1:
            raise ConfigError(f"only a single attention head is supported, got h={self.h}")
        if self.b not in SUPPORTED_BITWIDTHS:
            raise ConfigError(f"bitwidth must be one of {SUPPORTED_BITWIDTHS}, got {self.b}")
        if self.n < 1 or self.m < 1 or self.d_model < 1:
            raise ConfigError(f"n, m and d_model must be positive, got n={self.n}, m={self.m}, d_model={self.d_model}")

    @property
    def ffn_dim(self) -> int:
        return 4 * self.d_model

    def as_dict(self) -> Dict[str, int]:
        return {'n': self.n, 'm': self.m, 'd_model': self.d_model, 'b': self.b, 'h': self.h}


def linear_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, int]]:
    """(out_dim, in_dim) of every linear layer"""
    d = cfg.d_model
    return {
        'l_input': (d, cfg.m),
        'q': (d, d),
        'k': (d, d),
        'v': (d, d),
        'l_o': (d, d),
        'ffn1': (cfg.ffn_dim, d),
        'ffn2': (d, cfg.ffn_dim),
        'output': (1, d),
    }


def param_breakdown(cfg: ModelConfig) -> Dict[str, int]:
    """Weights plus biases per layer; BatchNorm layers hold gamma and beta"""
    breakdown = {}
    for layer, (out_dim, in_dim) in linear_shapes(cfg).items():
        breakdown[layer] = out_dim * (in_dim + 1)
    breakdown['bn_mha'] = 2 * cfg.d_model
    breakdown['bn_ffn'] = 2 * cfg.d_model
    return breakdown


def param_count(cfg: ModelConfig) -> int:
    """12 d^2 + (15 + m) d + 1"""
    d = cfg.d_model
    return 12 * d * d + (15 + cfg.m) * d + 1


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """Every integer parameter, table, edge qparams and requantization constant of one model"""
    config: ModelConfig
    input_linear: LinearParams
    q_linear: LinearParams
    k_linear: LinearParams
    v_linear: LinearParams
    o_linear: LinearParams
    ffn1: LinearParams
    ffn2: LinearParams
    output_linear: LinearParams
    bn_mha: BatchNormParams
    bn_ffn: BatchNormParams
    pe: PETable
    softmax_tables: SoftmaxTables
    edge_qparams: Dict[str, QParams] = field(default_factory=dict)
    edge_scales: Dict[str, FixedScale] = field(default_factory=dict)

    def __post_init__(self):
        missing = [edge for edge in EDGES if edge not in self.edge_qparams]
        if missing:
            raise CalibrationError(f"missing qparams for edges: {', '.join(missing)}")
        missing = [site for site in SCALE_SITES if site not in self.edge_scales]
        if missing:
            raise QuantizationError(f"missing fixed scales for sites: {', '.join(missing)}")

    def linear(self, layer: str) -> LinearParams:
        return getattr(self, LINEAR_FIELDS[layer])

    def batchnorm(self, layer: str) -> BatchNormParams:
        return getattr(self, layer)

    def requantization_sites(self) -> Dict[str, FixedScale]:
        """Every (M, n) pair in the model: linear and BatchNorm requantizers, then the edge sites"""
        sites = {layer: self.linear(layer).requant for layer in LINEAR_LAYERS}
        for layer in BATCHNORM_LAYERS:
            sites[layer] = self.batchnorm(layer).requant
        sites.update((site, self.edge_scales[site]) for site in SCALE_SITES)
        return sites

    def stored_param_count(self) -> int:
        total = 0
        for layer in LINEAR_LAYERS:
            params = self.linear(layer)
            total += params.weights.data.size + params.bias_q.size
        for layer in BATCHNORM_LAYERS:
            params = self.batchnorm(layer)
            total += params.gamma_hat_q.data.size + params.beta_star_q.size
        return total


def score_ratio(s_q: float, s_k: float, s_score: float, d_model: int, h: int = 1) -> float:
    """S_Q * S_K / (S_score * sqrt(d_model / h)), the folded attention scaling"""
    return s_q * s_k / (s_score * math.sqrt(d_model / h))


def _fixed_scale(site: str, ratio: float, width: int) -> FixedScale:
    try:
        return derive_fixed_scale(ratio, width)
    except QuantizationError as e:
        raise QuantizationError(f"{site}: {e}") from e


def _quantize_linear(
    layer: str,
    weight: np.ndarray,
    bias: np.ndarray,
    in_qp: QParams,
    out_qp: QParams,
    width: int,
) -> LinearParams:
    w_qp = calibrate(Observer.from_values(weight).including_zero(), out_qp.bitwidth)
    accumulator_scale = w_qp.scale * in_qp.scale
    return LinearParams(
        weights=quantize(weight, w_qp),
        bias_q=quantize_bias(bias, accumulator_scale),
        requant=_fixed_scale(layer, accumulator_scale / out_qp.scale, width),
        in_qp=in_qp,
        out_qp=out_qp,
    )


def _quantize_batchnorm(layer: str, stats, in_qp: QParams, out_qp: QParams, width: int) -> BatchNormParams:
    gamma_hat, beta_hat = fold_batchnorm(stats.gamma, stats.beta, stats.mu, stats.sigma2, stats.eps)
    g_qp = calibrate(Observer.from_values(gamma_hat).including_zero(), out_qp.bitwidth)
    accumulator_scale = g_qp.scale * in_qp.scale
    return BatchNormParams(
        gamma_hat_q=quantize(gamma_hat, g_qp),
        beta_star_q=quantize_bias(beta_hat, accumulator_scale),
        requant=_fixed_scale(layer, accumulator_scale / out_qp.scale, width),
        in_qp=in_qp,
        out_qp=out_qp,
    )


def assemble(
    cfg: ModelConfig,
    fm: 'FloatModel',
    record: 'CalibrationRecord',
    scale_width: int = DEFAULT_SCALE_WIDTH,
    exp_argument: str = 'scaled',
    softmax_policy: str = 'fit',
) -> QuantizedModel:
    """
    Quantize a float model into an integer-only QuantizedModel

    Weights and gamma_hat are quantized asymmetrically, biases and BatchNorm
    offsets symmetrically at the accumulator scale. Activation ranges come
    from the calibration record, widened to contain zero.

    Args:
        cfg: model configuration (b taken from here)
        fm: float weights and BatchNorm statistics
        record: per-edge observed ranges
        scale_width: FixedScale multiplier width w
        exp_argument: softmax exp() argument, 'scaled' or 'raw'
        softmax_policy: softmax table scale policy, 'fit' or 'shared'

    Returns:
        QuantizedModel
    """
    if (fm.config.n, fm.config.m, fm.config.d_model) != (cfg.n, cfg.m, cfg.d_model):
        raise ConfigError(f"float model shape {fm.config.as_dict()} does not match {cfg.as_dict()}")

    b = cfg.b
    edge_qp: Dict[str, QParams] = {}
    for edge in CALIBRATED_EDGES:
        observer = record.observers.get(edge)
        if observer is None or not observer.seen:
            raise CalibrationError(f"calibration record has no statistics for edge '{edge}'")
        edge_qp[edge] = calibrate(observer.including_zero(), b)

    pe = build_pe_table(cfg.n, cfg.d_model, b)
    edge_qp['pe'] = pe.qparams
    edge_qp['relu'] = edge_qp['ffn1']
    edge_qp = {edge: edge_qp[edge] for edge in EDGES}

    linears = {}
    for layer in LINEAR_LAYERS:
        dense = fm.linears[layer]
        linears[layer] = _quantize_linear(
            layer, dense.weight, dense.bias, edge_qp[LINEAR_INPUT_EDGE[layer]], edge_qp[layer], scale_width
        )

    batchnorms = {}
    for layer in BATCHNORM_LAYERS:
        batchnorms[layer] = _quantize_batchnorm(
            layer, fm.batchnorms[layer], edge_qp[BATCHNORM_INPUT_EDGE[layer]], edge_qp[layer], scale_width
        )

    tables = build_softmax_tables(
        edge_qp['score'], edge_qp['softmax'], cfg.n, cfg.h, exp_argument=exp_argument, policy=softmax_policy
    )

    s = {edge: qp.scale for edge, qp in edge_qp.items()}
    ratios = {
        'add_pe.lhs': s['l_input'] / s['add_pe'],
        'add_pe.rhs': s['pe'] / s['add_pe'],
        'score': score_ratio(s['q'], s['k'], s['score'], cfg.d_model, cfg.h),
        'attn': s['softmax'] * s['v'] / s['attn'],
        'add_mha.lhs': s['l_o'] / s['add_mha'],
        'add_mha.rhs': s['add_pe'] / s['add_mha'],
        'add_ffn.lhs': s['ffn2'] / s['add_ffn'],
        'add_ffn.rhs': s['bn_mha'] / s['add_ffn'],
        'gap': s['bn_ffn'] / (s['gap'] * cfg.n),
    }
    edge_scales = {site: _fixed_scale(site, ratios[site], scale_width) for site in SCALE_SITES}

    model = QuantizedModel(
        config=cfg,
        input_linear=linears['l_input'],
        q_linear=linears['q'],
        k_linear=linears['k'],
        v_linear=linears['v'],
        o_linear=linears['l_o'],
        ffn1=linears['ffn1'],
        ffn2=linears['ffn2'],
        output_linear=linears['output'],
        bn_mha=batchnorms['bn_mha'],
        bn_ffn=batchnorms['bn_ffn'],
        pe=pe,
        softmax_tables=tables,
        edge_qparams=edge_qp,
        edge_scales=edge_scales,
    )

    for edge, qp in edge_qp.items():
        logger.debug(f"edge {edge}: S={qp.scale!r} Z={qp.zero_point}{' (constant)' if qp.constant else ''}")
    for site, fs in model.requantization_sites().items():
        logger.debug(f"site {site}: M={fs.multiplier} n={fs.shift} r={fs.ratio!r}")
    logger.info(
        f"Assembled model n={cfg.n} m={cfg.m} d_model={cfg.d_model} b={cfg.b}: "
        f"{model.stored_param_count()} parameters"
    )
    return model


def quantize_input(model: QuantizedModel, x) -> IntTensor:
    """Quantize a real (n x m) window under the model's input edge qparams"""
    return quantize(np.asarray(x, dtype=np.float64), model.edge_qparams['input'])


def _layer(name: str, kernel, *args) -> IntTensor:
    try:
        return kernel(*args)
    except KernelError as e:
        raise ForwardError(name, str(e)) from e


def run_edges(model: QuantizedModel, x_q: IntTensor) -> Dict[str, IntTensor]:
    """Integer forward pass returning every edge tensor, in execution order"""
    cfg = model.config
    qp = model.edge_qparams
    fs = model.edge_scales

    if x_q.shape != (cfg.n, cfg.m):
        raise ForwardError('input', f"expected shape ({cfg.n}, {cfg.m}), got {x_q.shape}")
    if x_q.qparams != qp['input']:
        raise ForwardError('input', "input is not quantized under the model's input qparams")

    edges: Dict[str, IntTensor] = {'input': x_q}
    edges['l_input'] = _layer('l_input', int_linear, x_q, model.input_linear)
    edges['pe'] = model.pe.table
    edges['add_pe'] = _layer(
        'add_pe', int_add, edges['l_input'], edges['pe'], fs['add_pe.lhs'], fs['add_pe.rhs'], qp['add_pe']
    )
    edges['q'] = _layer('q', int_linear, edges['add_pe'], model.q_linear)
    edges['k'] = _layer('k', int_linear, edges['add_pe'], model.k_linear)
    edges['v'] = _layer('v', int_linear, edges['add_pe'], model.v_linear)
    edges['score'] = _layer('score', int_matmul, edges['q'], edges['k'], True, fs['score'], qp['score'])
    edges['softmax'] = _layer('softmax', int_softmax, edges['score'], model.softmax_tables)
    edges['attn'] = _layer('attn', int_matmul, edges['softmax'], edges['v'], False, fs['attn'], qp['attn'])
    edges['l_o'] = _layer('l_o', int_linear, edges['attn'], model.o_linear)
    edges['add_mha'] = _layer(
        'add_mha', int_add, edges['l_o'], edges['add_pe'], fs['add_mha.lhs'], fs['add_mha.rhs'], qp['add_mha']
    )
    edges['bn_mha'] = _layer('bn_mha', int_batchnorm, edges['add_mha'], model.bn_mha)
    edges['ffn1'] = _layer('ffn1', int_linear, edges['bn_mha'], model.ffn1)
    edges['relu'] = _layer('relu', int_relu, edges['ffn1'])
    edges['ffn2'] = _layer('ffn2', int_linear, edges['relu'], model.ffn2)
    edges['add_ffn'] = _layer(
        'add_ffn', int_add, edges['ffn2'], edges['bn_mha'], fs['add_ffn.lhs'], fs['add_ffn.rhs'], qp['add_ffn']
    )
    edges['bn_ffn'] = _layer('bn_ffn', int_batchnorm, edges['add_ffn'], model.bn_ffn)
    edges['gap'] = _layer('gap', int_gap, edges['bn_ffn'], fs['gap'], qp['gap'])
    edges['output'] = _layer('output', int_linear, edges['gap'], model.output_linear)
    return edges


def forward(model: QuantizedModel, x_q: IntTensor) -> Tuple[int, float]:
    """Run the encoder and return the output integer and its dequantized value"""
    output = run_edges(model, x_q)['output']
    return int(output.data[0, 0]), float(dequantize(output)[0, 0])


def predict(model: QuantizedModel, x) -> Tuple[int, float]:
    """Quantize a real window and run forward"""
    return forward(model, quantize_input(model, x))
