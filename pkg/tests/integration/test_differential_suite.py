#!/usr/bin/env python3
"""
Bit-exact differential suite: integer engine against the exact-arithmetic oracle
"""
import itertools

import pytest

from int_transformer.model import EDGES, ModelConfig, run_edges
from int_transformer.reference import build_random_instance, first_mismatch, sim_quant_forward

SEEDS = range(100)
CONFIGS = list(itertools.product((6, 12), (8, 16, 32), (4, 6, 8)))


@pytest.mark.parametrize('n, d_model, b', CONFIGS)
def test_engine_matches_oracle_on_every_edge(n, d_model, b):
    """Every edge tensor agrees exactly for 100 random models"""
    cfg = ModelConfig(n=n, m=2, d_model=d_model, b=b)
    for seed in SEEDS:
        instance = build_random_instance(cfg, seed)
        engine_edges = run_edges(instance.model, instance.x_q)
        assert list(engine_edges) == list(EDGES)
        mismatch = first_mismatch(engine_edges, sim_quant_forward(instance.model, instance.x_q))
        assert mismatch is None, f"seed {seed}: {mismatch.describe()}"
    print(f"✅ n={n} d_model={d_model} b={b}: {len(SEEDS)} models bit-exact")


@pytest.mark.parametrize('policy, exp_argument', [('shared', 'scaled'), ('fit', 'raw'), ('shared', 'raw')])
def test_table_variants_match_oracle(policy, exp_argument):
    """Alternative softmax table constructions stay bit-exact too"""
    cfg = ModelConfig(n=12, m=7, d_model=16, b=8)
    for seed in range(20):
        instance = build_random_instance(cfg, seed, softmax_policy=policy, exp_argument=exp_argument)
        engine_edges = run_edges(instance.model, instance.x_q)
        mismatch = first_mismatch(engine_edges, sim_quant_forward(instance.model, instance.x_q))
        assert mismatch is None, f"seed {seed}: {mismatch.describe()}"


def test_wider_multiplier_matches_oracle():
    """A 32-bit multiplier width only changes constants, not agreement"""
    cfg = ModelConfig(n=6, m=1, d_model=8, b=6)
    for seed in range(20):
        instance = build_random_instance(cfg, seed, scale_width=32)
        mismatch = first_mismatch(
            run_edges(instance.model, instance.x_q), sim_quant_forward(instance.model, instance.x_q)
        )
        assert mismatch is None, f"seed {seed}: {mismatch.describe()}"


def test_truncating_oracle_is_detected():
    """The suite is not vacuous: a truncating rescale disagrees somewhere"""
    cfg = ModelConfig(n=6, m=2, d_model=8, b=8)
    found = []
    for seed in range(5):
        instance = build_random_instance(cfg, seed)
        found.append(first_mismatch(
            run_edges(instance.model, instance.x_q),
            sim_quant_forward(instance.model, instance.x_q, rescale_rounding='truncate'),
        ))
    assert any(mismatch is not None for mismatch in found)
