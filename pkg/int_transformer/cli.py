"""
Command-line entry point: intq {quantize,infer,eval,verify,export}

Exit codes: 0 success, 1 verification mismatch, 2 usage or I/O error.
Reports go to stdout, logs to stderr.
"""

import sys
import json
import logging
import argparse
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import get_engine_config
from utils import setup_service_logging

from .errors import ConfigError, DataIOError, IntTransformerError
from .model import EDGES, ModelConfig, assemble, param_count, predict, quantize_input, run_edges
from .reference import (
    EdgeMismatch,
    FloatModel,
    build_random_instance,
    calibrate_model,
    first_mismatch,
    float_forward,
    sim_quant_forward,
)
from .dataio import DatasetScalers, load_csv, load_window, rmse
from .artifact import load_artifact, save_model
from .hw_export import export_hw_mem

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_ERROR = 2

DEFAULT_SHAPE = {'n': 12, 'm': 1, 'd_model': 8, 'b': 8}


class Report:
    """Ordered key/value report rendered as text or key=value lines"""

    def __init__(self, fmt: str = 'text'):
        self.fmt = fmt
        self.items: List[Tuple[str, object]] = []
        self.notes: List[str] = []

    def add(self, key: str, value) -> None:
        self.items.append((key, value))

    def note(self, text: str) -> None:
        self.notes.append(text)

    def render(self) -> str:
        separator = ': ' if self.fmt == 'text' else '='
        lines = [f"{key}{separator}{value}" for key, value in self.items]
        if self.fmt == 'text':
            lines.extend(self.notes)
        return '\n'.join(lines)


def _csv_list(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [item.strip() for item in value.split(',') if item.strip()]


def _resolve_config(args, bitwidth: Optional[int] = None) -> ModelConfig:
    """Defaults, then the --config JSON file, then inline flags"""
    shape = dict(DEFAULT_SHAPE)
    if getattr(args, 'config', None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
        shape.update({key: loaded[key] for key in ('n', 'm', 'd_model', 'b', 'h') if key in loaded})
    for key, flag in (('n', 'n'), ('m', 'm'), ('d_model', 'd_model')):
        value = getattr(args, flag, None)
        if value is not None:
            shape[key] = value
    if bitwidth is not None:
        shape['b'] = bitwidth
    return ModelConfig(**shape)


def _reject_flags(args, flags: Sequence[str], reason: str) -> None:
    """Fail on flags the chosen source would silently ignore"""
    given = [f"--{flag.replace('_', '-')}" for flag in flags if getattr(args, flag, None) is not None]
    if given:
        raise ConfigError(f"{', '.join(given)} cannot be combined with {reason}")


def _add_shape_flags(parser: argparse.ArgumentParser, multi_bits: bool = False) -> None:
    parser.add_argument('--config', help='JSON file with n, m, d_model and b')
    parser.add_argument('--n', type=int, help='Input length (timesteps)')
    parser.add_argument('--m', type=int, help='Input feature count')
    parser.add_argument('--d-model', dest='d_model', type=int, help='Embedding dimension')
    if multi_bits:
        parser.add_argument('--bits', type=int, nargs='+', help='Bitwidths to run (4, 6, 8)')
    else:
        parser.add_argument('--bits', type=int, help='Quantization bitwidth (4, 6 or 8)')


def _add_engine_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--exp-argument', choices=('scaled', 'raw'), help='Softmax exp() argument')
    parser.add_argument('--softmax-policy', choices=('fit', 'shared'), help='Softmax table scale policy')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='intq', description='Integer-only time-series Transformer engine')
    parser.add_argument('--format', choices=('text', 'kv'), default='text', help='Report format (default: text)')
    commands = parser.add_subparsers(dest='command', required=True)

    quantize = commands.add_parser('quantize', help='Calibrate and quantize a float model into an artifact')
    _add_shape_flags(quantize)
    _add_engine_flags(quantize)
    quantize.add_argument('--weights', help='Float weights JSON (default: seeded random weights)')
    quantize.add_argument('--calib', help='Calibration CSV (default: seeded random windows)')
    quantize.add_argument('--features', help='Comma-separated feature columns of the calibration CSV')
    quantize.add_argument('--target', help='Target column of the calibration CSV')
    quantize.add_argument('--seed', type=int, default=0, help='Seed for random weights/calibration (default: 0)')
    quantize.add_argument('--out', required=True, help='Artifact output directory')

    infer = commands.add_parser('infer', help='Run one window through an artifact')
    infer.add_argument('--artifact', required=True, help='Artifact directory')
    infer.add_argument('--input', required=True, help='CSV holding one n x m window')
    infer.add_argument('--features', help='Comma-separated feature columns (default: artifact mapping)')

    evaluate = commands.add_parser('eval', help='RMSE of an artifact over a test CSV')
    evaluate.add_argument('--artifact', required=True, help='Artifact directory')
    evaluate.add_argument('--test', required=True, help='Test CSV')
    evaluate.add_argument('--features', help='Comma-separated feature columns (default: artifact mapping)')
    evaluate.add_argument('--target', help='Target column (default: artifact mapping)')
    evaluate.add_argument('--weights', help='Float weights JSON; also report the float64 RMSE and the relative change')

    verify = commands.add_parser('verify', help='Differential check of the engine against the exact oracle')
    _add_shape_flags(verify, multi_bits=True)
    _add_engine_flags(verify)
    verify.add_argument('--artifact', help='Verify a saved model on random inputs instead of random models')
    verify.add_argument('--seed', type=int, default=0, help='Base seed (default: 0)')
    verify.add_argument('--trials', type=int, default=10, help='Random instances per bitwidth (default: 10)')
    verify.add_argument('--workers', type=int, help='Worker threads (default: INTQ_VERIFY_WORKERS)')
    verify.add_argument('--fault', choices=('truncate',), help=argparse.SUPPRESS)

    export = commands.add_parser('export', help='Write hardware memory files for an artifact')
    export.add_argument('--artifact', required=True, help='Artifact directory')
    export.add_argument('--out', required=True, help='Output directory')

    return parser


def cmd_quantize(args, report: Report) -> int:
    engine = get_engine_config()
    if args.weights:
        # the weight file fixes the shape, --bits may still override b
        _reject_flags(args, ('config', 'n', 'm', 'd_model'), '--weights')
        fm = FloatModel.from_json(args.weights, bitwidth=args.bits)
        cfg = fm.config
    else:
        cfg = _resolve_config(args, args.bits)
        fm = FloatModel.random(cfg, args.seed)

    scalers = None
    features = _csv_list(args.features) or []
    if args.calib:
        if not features or not args.target:
            raise DataIOError("--calib needs --features and --target")
        if len(features) != cfg.m:
            raise ConfigError(f"--features names {len(features)} columns but the model has m={cfg.m}")
        dataset = load_csv(args.calib, features, args.target, cfg.n, split='train')
        scalers = DatasetScalers.fit(dataset)
        batch = scalers.transform(dataset).inputs
    else:
        rng = np.random.default_rng(args.seed)
        batch = rng.uniform(0.0, 1.0, size=(engine.calibration_samples, cfg.n, cfg.m))

    record = calibrate_model(fm, batch)
    model = assemble(
        cfg,
        fm,
        record,
        scale_width=engine.scale_width,
        exp_argument=args.exp_argument or engine.exp_argument,
        softmax_policy=args.softmax_policy or engine.softmax_policy,
    )
    save_model(args.out, model, scalers, tuple(features), args.target if args.calib else None)

    report.add('params', param_count(cfg))
    report.add('stored_params', model.stored_param_count())
    report.add('calibration_samples', batch.shape[0])
    for edge in EDGES:
        qp = model.edge_qparams[edge]
        report.add(f"edge.{edge}.scale", f"{qp.scale:.9g}")
        report.add(f"edge.{edge}.zero_point", qp.zero_point)
    report.add('artifact', args.out)
    return EXIT_OK


def cmd_infer(args, report: Report) -> int:
    artifact = load_artifact(args.artifact)
    cfg = artifact.model.config
    features = _csv_list(args.features) or list(artifact.feature_columns) or None
    window = load_window(args.input, features)
    if window.shape != (cfg.n, cfg.m):
        raise DataIOError(f"input window has shape {window.shape}, expected ({cfg.n}, {cfg.m})")

    if artifact.scalers is not None:
        window = artifact.scalers.features.transform(window)
    y_q, y = predict(artifact.model, window)
    forecast = float(artifact.scalers.inverse_target(y)) if artifact.scalers is not None else y

    report.add('prediction_q', y_q)
    report.add('prediction', repr(y))
    report.add('forecast', repr(forecast))
    return EXIT_OK


def cmd_eval(args, report: Report) -> int:
    artifact = load_artifact(args.artifact)
    cfg = artifact.model.config
    features = _csv_list(args.features) or list(artifact.feature_columns)
    target = args.target or artifact.target_column
    if not features or not target:
        raise DataIOError("feature/target columns are neither in the artifact nor given as flags")

    dataset = load_csv(args.test, features, target, cfg.n, split='test')
    inputs = dataset.inputs
    if artifact.scalers is not None:
        inputs = artifact.scalers.features.transform(inputs.reshape(-1, cfg.m)).reshape(inputs.shape)

    predictions = np.array([predict(artifact.model, window)[1] for window in inputs])
    if artifact.scalers is not None:
        predictions = artifact.scalers.inverse_target(predictions)

    error = rmse(predictions, dataset.targets)
    report.add('samples', len(dataset))
    report.add('rmse', repr(error))

    if args.weights:
        fm = FloatModel.from_json(args.weights)
        fcfg = fm.config
        if (fcfg.n, fcfg.m, fcfg.d_model) != (cfg.n, cfg.m, cfg.d_model):
            raise ConfigError(
                f"weights shape n={fcfg.n} m={fcfg.m} d_model={fcfg.d_model} does not match "
                f"the artifact (n={cfg.n} m={cfg.m} d_model={cfg.d_model})"
            )
        baseline = np.array([float_forward(fm, window) for window in inputs])
        if artifact.scalers is not None:
            baseline = artifact.scalers.inverse_target(baseline)
        error_fp32 = rmse(baseline, dataset.targets)
        report.add('rmse_fp32', repr(error_fp32))
        if error_fp32 > 0:
            report.add('rmse_change', repr((error - error_fp32) / error_fp32))
        else:
            report.add('rmse_change', 'nan')
            report.note('float RMSE is zero, relative change undefined')
    return EXIT_OK


def _verify_trial(cfg: ModelConfig, seed: int, args, engine, artifact_model=None) -> Optional[EdgeMismatch]:
    if artifact_model is None:
        instance = build_random_instance(
            cfg,
            seed,
            calibration_samples=engine.calibration_samples,
            scale_width=engine.scale_width,
            exp_argument=args.exp_argument or engine.exp_argument,
            softmax_policy=args.softmax_policy or engine.softmax_policy,
        )
        model, x_q = instance.model, instance.x_q
    else:
        model = artifact_model
        x = np.random.default_rng(seed).uniform(0.0, 1.0, size=(cfg.n, cfg.m))
        x_q = quantize_input(model, x)

    engine_edges = run_edges(model, x_q)
    oracle_edges = sim_quant_forward(model, x_q, rescale_rounding=args.fault or 'half_away')
    return first_mismatch(engine_edges, oracle_edges)


def cmd_verify(args, report: Report) -> int:
    engine = get_engine_config()
    workers = args.workers or engine.verify_workers
    if args.trials < 0:
        raise ConfigError("--trials must be non-negative")
    if workers < 1:
        raise ConfigError("--workers must be at least 1")

    if args.artifact:
        _reject_flags(args, ('config', 'n', 'm', 'd_model', 'bits'), '--artifact')
    artifact_model = load_artifact(args.artifact).model if args.artifact else None
    if artifact_model is not None:
        configs = [artifact_model.config]
    else:
        configs = [_resolve_config(args, bits) for bits in (args.bits or [None])]

    jobs = [(cfg, args.seed + trial) for cfg in configs for trial in range(args.trials)]
    logger.info(f"Verifying {len(jobs)} trials on {workers} worker(s)")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda job: _verify_trial(job[0], job[1], args, engine, artifact_model), jobs))

    failures = [(job, mismatch) for job, mismatch in zip(jobs, results) if mismatch is not None]
    report.add('trials', len(jobs))
    report.add('mismatches', len(failures))
    if not jobs:
        report.note('0 trials run')

    if failures:
        (cfg, seed), mismatch = failures[0]
        report.add('first_mismatch.config', f"n={cfg.n} m={cfg.m} d_model={cfg.d_model} b={cfg.b} seed={seed}")
        report.add('first_mismatch.edge', mismatch.edge)
        report.add('first_mismatch.index', mismatch.index)
        report.add('first_mismatch.engine', mismatch.engine_value)
        report.add('first_mismatch.oracle', mismatch.oracle_value)
        logger.error(f"❌ Verification failed: {mismatch.describe()}")
        return EXIT_MISMATCH

    logger.info(f"✅ {len(jobs)} trials bit-exact")
    return EXIT_OK


def cmd_export(args, report: Report) -> int:
    model = load_artifact(args.artifact).model
    memories = export_hw_mem(model, args.out)
    for memory in memories:
        report.add(f"memory.{memory.name}", f"{memory.depth}x{memory.width}")
    report.add('memories', len(memories))
    return EXIT_OK


COMMANDS = {
    'quantize': cmd_quantize,
    'infer': cmd_infer,
    'eval': cmd_eval,
    'verify': cmd_verify,
    'export': cmd_export,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI function"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        setup_service_logging('intq', logger_name='int_transformer')
        report = Report(args.format)
        status = COMMANDS[args.command](args, report)
        print(report.render())
        return status
    except (IntTransformerError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
