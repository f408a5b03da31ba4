#!/usr/bin/env python3
"""
Accuracy of the integer engine against float inference across bitwidths
"""
import numpy as np

from int_transformer.model import ModelConfig, forward
from int_transformer.reference import build_random_instance, float_forward

SEEDS = range(200)


def _median_error(b):
    errors = []
    for seed in SEEDS:
        instance = build_random_instance(ModelConfig(n=12, m=1, d_model=16, b=b), seed)
        _, prediction = forward(instance.model, instance.x_q)
        errors.append(abs(prediction - float_forward(instance.float_model, instance.x)))
    return float(np.median(errors))


def test_median_error_shrinks_with_bitwidth():
    """More bits never make the typical forecast worse"""
    med4, med6, med8 = (_median_error(b) for b in (4, 6, 8))
    print(f"median |int - float|: b=4 {med4:.4g}, b=6 {med6:.4g}, b=8 {med8:.4g}")
    assert med8 <= med6 <= med4


def test_eight_bit_forecast_tracks_float():
    """At b=8 the forecast is close to the float model"""
    cfg = ModelConfig(n=12, m=1, d_model=16, b=8)
    spans = []
    for seed in range(20):
        instance = build_random_instance(cfg, seed)
        _, prediction = forward(instance.model, instance.x_q)
        reference = float_forward(instance.float_model, instance.x)
        output_qp = instance.model.edge_qparams['output']
        spans.append(abs(prediction - reference) / (output_qp.scale * (2 ** cfg.b - 1)))
    # error relative to the calibrated output range
    assert float(np.median(spans)) < 0.25
