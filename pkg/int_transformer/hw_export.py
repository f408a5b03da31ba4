"""
Hardware memory-initialization export
One <memory>.hex file per ROM (two's-complement words, one per line) plus
hw_manifest.txt with depth/width per memory, the edge zero points and the
(M, n) constants of every requantization site
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np

from .errors import HwExportError
from .model import BATCHNORM_LAYERS, EDGES, LINEAR_LAYERS, QuantizedModel

logger = logging.getLogger(__name__)

HW_MANIFEST_NAME = 'hw_manifest.txt'
BIAS_WIDTH = 32


@dataclass(frozen=True)
class HwMemory:
    name: str
    depth: int
    width: int
    path: Path


def hex_digits(width: int) -> int:
    return (width + 3) // 4


def format_word(value: int, width: int) -> str:
    """Two's-complement hex word, zero-padded to ceil(width / 4) digits"""
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if not lo <= value <= hi:
        raise HwExportError(f"value {value} does not fit a {width}-bit word")
    return f"{value & ((1 << width) - 1):0{hex_digits(width)}X}"


def _memories(model: QuantizedModel):
    b = model.config.b
    for layer in LINEAR_LAYERS:
        params = model.linear(layer)
        yield f"{layer}_weight", params.weights.data, b
        yield f"{layer}_bias", params.bias_q, BIAS_WIDTH
    for layer in BATCHNORM_LAYERS:
        params = model.batchnorm(layer)
        yield f"{layer}_gamma", params.gamma_hat_q.data, b
        yield f"{layer}_beta", params.beta_star_q, BIAS_WIDTH
    yield 'pe', model.pe.table.data, b
    yield 'softmax_nlut', model.softmax_tables.nlut, 3 * b
    yield 'softmax_dlut', model.softmax_tables.dlut, 2 * b


def export_hw_mem(model: QuantizedModel, out_dir: Union[str, Path]) -> List[HwMemory]:
    """
    Write every ROM of the model as a hex memory file

    Weights, gamma and PE use b bits, DLUT 2b, NLUT 3b, biases and
    BatchNorm offsets 32. Matrices are flattened row-major.

    Returns:
        The written memories in manifest order
    """
    root = Path(out_dir)
    memories: List[HwMemory] = []
    manifest = [f"# bitwidth {model.config.b}"]
    try:
        root.mkdir(parents=True, exist_ok=True)
        for name, values, width in _memories(model):
            flat = np.asarray(values, dtype=np.int64).reshape(-1)
            path = root / f"{name}.hex"
            path.write_text(''.join(format_word(int(v), width) + '\n' for v in flat))
            memories.append(HwMemory(name, int(flat.size), width, path))
            manifest.append(f"memory {name} depth={flat.size} width={width} file={path.name}")

        for edge in EDGES:
            manifest.append(f"zero_point {edge} {model.edge_qparams[edge].zero_point}")
        manifest.append(f"zero_point softmax_e {model.softmax_tables.z_e}")
        for site, fs in model.requantization_sites().items():
            manifest.append(f"scale {site} M={fs.multiplier} n={fs.shift}")

        (root / HW_MANIFEST_NAME).write_text('\n'.join(manifest) + '\n')
    except OSError as e:
        raise HwExportError(f"cannot write hardware memory files to {root}: {e}") from e

    logger.info(f"Exported {len(memories)} memories to {root}")
    return memories


def parse_hex_mem(path: Union[str, Path], width: int) -> np.ndarray:
    """Read a hex memory file back into sign-extended int64 values"""
    path = Path(path)
    digits = hex_digits(width)
    sign_bit = 1 << (width - 1)
    mask = (1 << width) - 1
    values = []
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise HwExportError(f"cannot read {path}: {e}") from e
    for number, line in enumerate(lines, start=1):
        word = line.strip()
        if not word:
            continue
        if len(word) != digits:
            raise HwExportError(f"{path}:{number}: expected {digits} hex digits, got {word!r}")
        try:
            raw = int(word, 16)
        except ValueError:
            raise HwExportError(f"{path}:{number}: {word!r} is not hexadecimal") from None
        if raw > mask:
            raise HwExportError(f"{path}:{number}: {word!r} exceeds {width} bits")
        values.append(raw - (1 << width) if raw & sign_bit else raw)
    return np.array(values, dtype=np.int64)
