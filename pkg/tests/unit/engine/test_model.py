#!/usr/bin/env python3
"""
Unit tests for the integer encoder pipeline
Configuration, parameter counting, assembly and the forward pass
"""

import math

import numpy as np
import pytest

from int_transformer.errors import CalibrationError, ConfigError, ForwardError, KernelError
from int_transformer.kernels import int_matmul
from int_transformer.model import (
    EDGES,
    SCALE_SITES,
    ModelConfig,
    assemble,
    forward,
    param_breakdown,
    param_count,
    predict,
    quantize_input,
    run_edges,
    score_ratio,
)
from int_transformer.qcore import QParams, derive_fixed_scale, quantize
from int_transformer.reference import FloatModel, calibrate_model, float_forward, sim_quant_forward


class TestModelConfig:
    """Test ModelConfig validation"""

    def test_derived_dimensions(self):
        cfg = ModelConfig(n=12, m=7, d_model=16, b=6)
        assert cfg.ffn_dim == 64
        assert cfg.h == 1
        assert cfg.as_dict() == {'n': 12, 'm': 7, 'd_model': 16, 'b': 6, 'h': 1}

    @pytest.mark.parametrize('kwargs', [
        {'h': 2},
        {'b': 5},
        {'n': 0},
        {'m': 0},
        {'d_model': -8},
    ])
    def test_invalid_config_raises(self, kwargs):
        args = {'n': 12, 'm': 1, 'd_model': 8, 'b': 8, **kwargs}
        with pytest.raises(ConfigError):
            ModelConfig(**args)


class TestParamCount:
    """Test the parameter inventory"""

    @pytest.mark.parametrize('m, d_model, expected', [
        (1, 8, 897),
        (1, 16, 3329),
        (1, 32, 12801),
        (1, 64, 50177),
        (7, 8, 945),
        (7, 16, 3425),
        (7, 32, 12993),
        (7, 64, 50561),
    ])
    def test_fixtures(self, m, d_model, expected):
        assert param_count(ModelConfig(n=12, m=m, d_model=d_model, b=8)) == expected

    @pytest.mark.parametrize('n', [12, 24])
    @pytest.mark.parametrize('m', [1, 7])
    @pytest.mark.parametrize('d_model', [8, 16, 32, 64])
    def test_breakdown_sums_to_total(self, n, m, d_model):
        cfg = ModelConfig(n=n, m=m, d_model=d_model, b=8)
        breakdown = param_breakdown(cfg)
        assert sum(breakdown.values()) == param_count(cfg)
        assert breakdown['output'] == d_model + 1
        assert breakdown['ffn1'] == 4 * d_model * (d_model + 1)

    def test_stored_parameters_match_count(self, random_instance):
        for m in (1, 7):
            instance = random_instance(m=m, d_model=8)
            assert instance.model.stored_param_count() == param_count(instance.model.config)


class TestAssemble:
    """Test assembly of a quantized model"""

    def test_edges_and_sites_complete(self, random_instance):
        model = random_instance().model
        assert tuple(model.edge_qparams) == EDGES
        assert set(model.edge_scales) == set(SCALE_SITES)
        assert len(model.requantization_sites()) == 8 + 2 + len(SCALE_SITES)
        assert model.edge_qparams['relu'] == model.edge_qparams['ffn1']
        assert model.edge_qparams['pe'] == model.pe.qparams

    def test_fixed_scales_follow_edge_scales(self, random_instance):
        model = random_instance(d_model=16).model
        s = {edge: qp.scale for edge, qp in model.edge_qparams.items()}
        assert model.edge_scales['score'].ratio == pytest.approx(s['q'] * s['k'] / (s['score'] * 4.0))
        assert model.edge_scales['gap'].ratio == pytest.approx(s['bn_ffn'] / (s['gap'] * 6))
        for fs in model.requantization_sites().values():
            assert abs(fs.value - fs.ratio) <= 2.0 ** (-fs.shift - 1)

    def test_edge_ranges_contain_zero(self, random_instance):
        for edge, qp in random_instance().model.edge_qparams.items():
            assert qp.qmin <= qp.zero_point <= qp.qmax, edge

    def test_deterministic(self, small_config, rng):
        fm = FloatModel.random(small_config, 3)
        record = calibrate_model(fm, rng.uniform(0, 1, size=(8, 6, 2)))
        first = assemble(small_config, fm, record)
        second = assemble(small_config, fm, record)
        assert first.edge_qparams == second.edge_qparams
        assert first.requantization_sites() == second.requantization_sites()
        for layer in ('l_input', 'q', 'ffn2', 'output'):
            assert np.array_equal(first.linear(layer).weights.data, second.linear(layer).weights.data)
            assert np.array_equal(first.linear(layer).bias_q, second.linear(layer).bias_q)
        assert np.array_equal(first.softmax_tables.nlut, second.softmax_tables.nlut)

    def test_missing_calibration_edge_named(self, small_config, rng):
        fm = FloatModel.random(small_config, 3)
        record = calibrate_model(fm, rng.uniform(0, 1, size=(2, 6, 2)))
        del record.observers['attn']
        with pytest.raises(CalibrationError, match="'attn'"):
            assemble(small_config, fm, record)

    def test_shape_mismatch_raises(self, small_config, rng):
        fm = FloatModel.random(ModelConfig(n=6, m=3, d_model=8, b=8), 3)
        record = calibrate_model(fm, rng.uniform(0, 1, size=(2, 6, 3)))
        with pytest.raises(ConfigError):
            assemble(small_config, fm, record)

    def test_score_ratio(self):
        assert score_ratio(0.1, 0.2, 0.05, 16) == pytest.approx(0.1 * 0.2 / (0.05 * 4))


class TestForward:
    """Test the integer forward pass"""

    def test_zero_weight_model_outputs_bias(self, small_config, rng):
        fm = FloatModel.zeros(small_config, output_bias=0.25)
        record = calibrate_model(fm, rng.uniform(0, 1, size=(4, 6, 2)))
        model = assemble(small_config, fm, record)
        x = rng.uniform(0, 1, size=(6, 2))

        assert float_forward(fm, x) == 0.25
        y_q, y = predict(model, x)
        output_qp = model.edge_qparams['output']
        # bias rounding at the accumulator scale plus one output step
        tolerance = 0.5 * model.edge_qparams['gap'].scale + output_qp.scale
        assert y == pytest.approx(0.25, abs=tolerance)
        assert y == pytest.approx(output_qp.scale * (y_q - output_qp.zero_point))

    def test_runs_edges_in_order_within_range(self, random_instance):
        instance = random_instance(n=6, m=7, d_model=8, b=8)
        edges = run_edges(instance.model, instance.x_q)
        assert tuple(edges) == EDGES
        for edge, tensor in edges.items():
            qp = instance.model.edge_qparams[edge]
            assert tensor.qparams == qp, edge
            assert np.all((tensor.data >= qp.qmin) & (tensor.data <= qp.qmax)), edge
        assert edges['score'].shape == (6, 6)
        assert edges['gap'].shape == (1, 8)
        assert edges['output'].shape == (1, 1)

    @pytest.mark.parametrize('bits', [4, 6, 8])
    def test_matches_oracle(self, random_instance, bits):
        for seed in range(3):
            instance = random_instance(b=bits, seed=seed)
            engine = run_edges(instance.model, instance.x_q)
            oracle = sim_quant_forward(instance.model, instance.x_q)
            for edge in EDGES:
                assert np.array_equal(engine[edge].data, oracle[edge]), edge

    def test_forward_returns_dequantized_output(self, random_instance):
        instance = random_instance(seed=4)
        y_q, y = forward(instance.model, instance.x_q)
        assert y_q == run_edges(instance.model, instance.x_q)['output'].data[0, 0]
        qp = instance.model.edge_qparams['output']
        assert y == pytest.approx(qp.scale * (y_q - qp.zero_point))
        assert forward(instance.model, instance.x_q) == (y_q, y)

    def test_concurrent_forward_is_reentrant(self, random_instance):
        from concurrent.futures import ThreadPoolExecutor

        instance = random_instance(seed=5)
        expected = forward(instance.model, instance.x_q)
        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(lambda _: forward(instance.model, instance.x_q), range(8)))
        assert all(result == expected for result in results)

    def test_wrong_input_shape(self, random_instance):
        instance = random_instance()
        bad = quantize(np.zeros((5, 2)), instance.model.edge_qparams['input'])
        with pytest.raises(ForwardError) as excinfo:
            run_edges(instance.model, bad)
        assert excinfo.value.layer == 'input'

    def test_wrong_input_qparams(self, random_instance):
        instance = random_instance()
        bad = quantize(instance.x, QParams(0.5, 0, 8))
        with pytest.raises(ForwardError, match='input'):
            run_edges(instance.model, bad)

    def test_kernel_errors_carry_layer_name(self, random_instance, mocker):
        instance = random_instance()
        mocker.patch('int_transformer.model.int_softmax', side_effect=KernelError('boom'))
        with pytest.raises(ForwardError) as excinfo:
            run_edges(instance.model, instance.x_q)
        assert excinfo.value.layer == 'softmax'
        assert 'boom' in str(excinfo.value)

    def test_score_folding_is_live(self, random_instance):
        """Dropping the 1/sqrt(d_model) factor changes the score edge"""
        instance = random_instance(d_model=16, seed=1)
        model = instance.model
        edges = run_edges(model, instance.x_q)
        s = {edge: qp.scale for edge, qp in model.edge_qparams.items()}
        unfolded = derive_fixed_scale(s['q'] * s['k'] / s['score'])
        score = int_matmul(edges['q'], edges['k'], True, unfolded, model.edge_qparams['score'])
        assert not np.array_equal(score.data, edges['score'].data)
        assert model.edge_scales['score'].ratio == pytest.approx(unfolded.ratio / math.sqrt(16))

    def test_quantize_input_uses_input_edge(self, random_instance):
        instance = random_instance()
        x_q = quantize_input(instance.model, instance.x)
        assert x_q.qparams == instance.model.edge_qparams['input']
        assert np.array_equal(x_q.data, instance.x_q.data)
