"""
Pytest configuration and fixtures for the integer Transformer engine
"""

import logging
import sys
from pathlib import Path

import numpy as np
import pytest


# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from int_transformer.model import ModelConfig  # noqa: E402
from int_transformer.qcore import QParams  # noqa: E402
from int_transformer.reference import build_random_instance  # noqa: E402


@pytest.fixture
def rng():
    """Seeded generator so every test run draws the same values"""
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(n=6, m=2, d_model=8, b=8)


@pytest.fixture
def random_instance():
    """Factory for seeded random (model, input) instances"""
    def _build(n=6, m=2, d_model=8, b=8, seed=0, **kwargs):
        return build_random_instance(ModelConfig(n=n, m=m, d_model=d_model, b=b), seed, **kwargs)
    return _build


@pytest.fixture
def unit_qp():
    """Factory for QParams with an explicit scale and zero point"""
    def _make(scale=1.0, zero_point=0, bitwidth=8):
        return QParams(scale, zero_point, bitwidth)
    return _make


@pytest.fixture
def write_csv(tmp_path):
    """Write rows (a list of dicts or raw text) to a CSV under tmp_path"""
    def _write(rows, name='data.csv'):
        path = tmp_path / name
        if isinstance(rows, str):
            path.write_text(rows)
            return path
        columns = list(rows[0].keys())
        lines = [','.join(columns)]
        for row in rows:
            lines.append(','.join('' if row[c] is None else str(row[c]) for c in columns))
        path.write_text('\n'.join(lines) + '\n')
        return path
    return _write


@pytest.fixture(autouse=True)
def engine_environment(monkeypatch):
    """Pin engine/logging variables so a developer's .env never leaks into tests"""
    for name in ('INTQ_SCALE_WIDTH', 'INTQ_EXP_ARGUMENT', 'INTQ_SOFTMAX_POLICY',
                 'INTQ_CALIBRATION_SAMPLES', 'INTQ_VERIFY_WORKERS', 'LOG_LEVEL', 'LOG_DIR'):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv('LOG_TO_FILE', 'false')
    yield
    # the CLI detaches the package logger from root; undo it for caplog
    package_logger = logging.getLogger('int_transformer')
    package_logger.handlers.clear()
    package_logger.propagate = True
    package_logger.setLevel(logging.NOTSET)
