#!/usr/bin/env python3
"""
Constrained Unrolled Transformer Training
Command-line entry point: train, sweep, gradcheck, ratio-report
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import Config
from src.data_logger import DataLogger
from src.data_tasks import TRAIN_NOISE_KEY, TaskData, global_sigma, prepare_task, split_id_ood, with_noise
from src.evaluation import (
    aggregate_seeds,
    layer_loss_rows,
    layerwise_eval,
    metrics_rows,
    ratio_stats,
    sweep,
)
from src.exceptions import CheckpointError, ConfigError, TrainingDivergedError
from src.experiment_config import ExperimentConfig
from src.gradcheck import run_suite
from src.models import ModelParams, init_model
from src.trainer import erm_train, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class ExperimentRunner:
    """Wires data generation, training, evaluation and artifacts for one config"""

    def __init__(self, config: ExperimentConfig, output_dir: Optional[str] = None):
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.output_dir = output_dir or config.run.output_dir or Config.OUTPUT_DIR
        self._data: Dict[int, TaskData] = {}

    def run_logger(self, seed: int) -> DataLogger:
        return DataLogger(os.path.join(self.output_dir, self.config.run_name(seed)))

    def prepare_data(self, seed: int, data_logger: Optional[DataLogger] = None) -> TaskData:
        """Train/held-out data for a seed, from the cache when enabled"""
        if seed in self._data:
            return self._data[seed]
        task = self.config.task
        data = None
        if task.cache_data and data_logger is not None:
            train_clean = data_logger.load_dataset("train_data.bin")
            heldout = data_logger.load_dataset("heldout_data.bin")
            if train_clean is not None and heldout is not None:
                sigma_x = global_sigma(train_clean.clean)
                data = TaskData(with_noise(train_clean, task.gamma_train, sigma_x, seed, TRAIN_NOISE_KEY),
                                heldout, sigma_x)
                self.logger.info(f"📦 Loaded cached data for seed {seed}")
        if data is None:
            data = prepare_task(
                task.kind, task.n, task.t, task.train_count, task.heldout_count, task.gamma_train,
                seed=seed, structure=task.structure, offset=task.data_offset, scale=task.signal_scale,
                num_classes=task.num_classes if task.kind == "classification" else None,
                separation=task.separation,
            )
            if task.cache_data and data_logger is not None:
                data_logger.save_dataset("train_data.bin", data.train, seed)
                data_logger.save_dataset("heldout_data.bin", data.heldout, seed)
        self.logger.info(f"📐 sigma_x for seed {seed}: {data.sigma_x!r}")
        self._data[seed] = data
        return data

    def train(self) -> bool:
        """Train every configured variant for every seed"""
        sched = self.config.schedule()
        for seed in self.config.run.seeds:
            run = self.run_logger(seed)
            if not run.save_config(self.config.to_ini()):
                return False
            data = self.prepare_data(seed, run)
            for variant in self.config.train.variants:
                self.logger.info(f"🚀 Training {variant} {self.config.model.kind} model (seed {seed})")
                params = init_model(**self.config.model_kwargs(variant, seed))
                cfg = self.config.train_config(seed)
                try:
                    if variant == "constrained":
                        result = train(params, data.train, sched, self.config.dual_state(), cfg)
                    else:
                        result = erm_train(params, data.train, cfg, sched)
                except TrainingDivergedError as e:
                    run.log_training(variant, e.log, sched.num_layers)
                    raise
                if not run.log_training(variant, result.log, sched.num_layers):
                    return False
                save_checkpoint(run.checkpoint_path(variant), result.params, self.metadata(variant, seed))

                losses = layerwise_eval(result.params, self.id_set(seed))
                self.logger.info(f"📊 {variant} held-out layer losses: "
                                 + ", ".join(f"{loss:.4g}" for loss in losses))
                if result.alerts.get('total_alerts'):
                    self.logger.warning(f"⚠️ {variant}: {result.alerts['total_alerts']} training alerts "
                                        f"{result.alerts['by_severity']}")
        return True

    def id_set(self, seed: int):
        """Held-out data at the training perturbation level"""
        task = self.config.task
        data = self.prepare_data(seed)
        return split_id_ood(data.heldout, task.gamma_train, [task.gamma_train], data.sigma_x, seed)[0].data

    def metadata(self, variant: str, seed: int) -> dict:
        return {"model_tag": variant, "seed": seed, "config_hash": self.config.config_hash()}

    def check_compatible(self, params: ModelParams, path: str):
        """Reject checkpoints whose structure differs from the config"""
        expected = init_model(**self.config.model_kwargs("constrained", 0))
        mismatches = []
        for name in ("kind", "n", "d", "num_layers"):
            if getattr(params, name) != getattr(expected, name):
                mismatches.append(f"{name}={getattr(params, name)} (config {getattr(expected, name)})")
        has_readout = params.readout is not None
        if has_readout != (expected.readout is not None):
            mismatches.append("readout presence")
        elif has_readout and params.readout.num_classes != expected.readout.num_classes:
            mismatches.append(f"num_classes={params.readout.num_classes}")
        if mismatches:
            raise CheckpointError(f"{path} does not match the config: {', '.join(mismatches)}")

    def load(self, paths: Sequence[str], seed_override: Optional[int] = None) -> List[Tuple[str, int, ModelParams]]:
        loaded = []
        for path in paths:
            params, meta = load_checkpoint(path)
            self.check_compatible(params, path)
            if meta.get("config_hash") not in (None, self.config.config_hash()):
                self.logger.warning(f"⚠️ {path} was trained under a different config hash")
            seed = seed_override if seed_override is not None else int(meta.get("seed", self.config.run.seeds[0]))
            loaded.append((meta.get("model_tag", Path(path).stem), seed, params))
        return loaded

    def sweep(self, paths: Sequence[str], seed_override: Optional[int] = None) -> bool:
        """Evaluate checkpoints across the perturbation grid and write the metrics tables"""
        task = self.config.task
        rows, layer_rows, by_tag = [], [], {}
        eval_cache = {}
        for tag, seed, params in self.load(paths, seed_override):
            if seed not in eval_cache:
                data = self.prepare_data(seed)
                eval_cache[seed] = split_id_ood(data.heldout, task.gamma_train, task.gamma_grid, data.sigma_x, seed)
            results = sweep({tag: params}, eval_cache[seed])
            rows += metrics_rows(results, seed)
            layer_rows += layer_loss_rows(results, seed)
            by_tag.setdefault(tag, []).append(results[tag])

            result = results[tag]
            raw, normalized = result.auc()
            print(f"📈 {tag} (seed {seed}): {result.metric_name} "
                  + " ".join(f"γ={g:g}:{m:.4f}" for g, m in zip(result.gammas, result.metric)))
            print(f"   AUC raw {raw:.4f}, normalized {normalized:.4f}, mean {result.mean_metric():.4f}")

        for tag, results in by_tag.items():
            if len(results) > 1:
                summary = aggregate_seeds(results)
                print(f"🧮 {tag} over {summary.seeds} seeds: AUC {summary.auc_normalized[0]:.4f} "
                      f"± {summary.auc_normalized[1]:.4f}, mean {summary.mean_metric[0]:.4f} "
                      f"± {summary.mean_metric[1]:.4f}")

        out = DataLogger(os.path.join(self.output_dir, f"{self.config.config_hash()[:12]}-sweep"))
        return out.log_metrics(rows) and out.log_layer_losses(layer_rows)

    def ratio_report(self, paths: Sequence[str], seed_override: Optional[int] = None) -> bool:
        """Per-sample layer loss ratios on held-out data at the training perturbation level"""
        alpha = tuple(self.config.schedule().alpha)
        target = f"≤{1 - alpha[0]:g}" if len(set(alpha)) == 1 else "≤1-α per layer"
        ok = True
        for tag, seed, params in self.load(paths, seed_override):
            stats = ratio_stats(params, self.id_set(seed), alpha)
            print(f"📉 {tag} (seed {seed}): {stats.ratios.size} ratios, {stats.excluded} excluded")
            print(f"   mean {stats.mean:.4f}  median {stats.median:.4f}")
            print(f"   descending (<1): {stats.fraction_descending:.1%}   "
                  f"meeting target ({target}): {stats.fraction_target:.1%}")
            ok = self.run_logger(seed).log_ratio_histogram(tag, stats.edges, stats.counts,
                                                           stats.fractions, stats.cdf) and ok
        return ok


def run_gradcheck(trials: int, tolerance: float, seed: int) -> int:
    print(f"🔍 Gradient check: {trials} trials per case, tolerance {tolerance:g}")
    print("=" * 60)
    reports = run_suite(trials=trials, tolerance=tolerance, seed=seed)
    for report in reports:
        icon = "✅" if report.passed else "❌"
        print(f"{icon} {report.name:<22} worst relative error {report.worst_error:.3e}")
    print("=" * 60)
    failing = [report.name for report in reports if not report.passed]
    if failing:
        print(f"❌ Failing cases: {', '.join(failing)}")
        return EXIT_FAILURE
    print("✅ All gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Constrained training of unrolled transformers')
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    train_parser = subparsers.add_parser('train', help='Train constrained and/or unconstrained models')
    sweep_parser = subparsers.add_parser('sweep', help='Evaluate checkpoints across perturbation levels')
    ratio_parser = subparsers.add_parser('ratio-report', help='Per-sample layer loss ratio statistics')
    for sub in (train_parser, sweep_parser, ratio_parser):
        sub.add_argument('--config', required=True, help='Experiment config (INI)')
        sub.add_argument('--out', help='Output directory (default: OUTPUT_DIR or [run] output_dir)')
        sub.add_argument('--seed', type=int, help='Override the configured seeds')
    for sub in (sweep_parser, ratio_parser):
        sub.add_argument('--checkpoint', action='append', required=True,
                         help='Checkpoint file (repeatable)')

    gradcheck_parser = subparsers.add_parser('gradcheck', help='Finite-difference gradient check suite')
    gradcheck_parser.add_argument('--trials', type=int, default=Config.GRADCHECK_TRIALS,
                                  help=f'Random instances per case (default: {Config.GRADCHECK_TRIALS})')
    gradcheck_parser.add_argument('--tolerance', type=float, default=Config.GRADCHECK_TOLERANCE,
                                  help=f'Maximum relative error (default: {Config.GRADCHECK_TOLERANCE:g})')
    gradcheck_parser.add_argument('--seed', type=int, default=Config.GRADCHECK_SEED)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    logger = Config.setup_logging()
    try:
        Config.validate_config()
    except ValueError as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG

    if args.command == 'gradcheck':
        return run_gradcheck(args.trials, args.tolerance, args.seed)

    try:
        config = ExperimentConfig.from_file(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
    except ConfigError as e:
        logger.error(f"❌ Invalid config: {e}")
        print(f"❌ Invalid config field {e.field}: {e}")
        return EXIT_CONFIG

    runner = ExperimentRunner(config, args.out)
    try:
        if args.command == 'train':
            ok = runner.train()
        elif args.command == 'sweep':
            ok = runner.sweep(args.checkpoint, args.seed)
        else:
            ok = runner.ratio_report(args.checkpoint, args.seed)
    except ConfigError as e:
        logger.error(f"❌ Invalid config: {e}")
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"❌ {args.command} failed: {e}")
        return EXIT_FAILURE

    if not ok:
        print(f"❌ {args.command} could not write its outputs")
        return EXIT_FAILURE
    print(f"✅ {args.command} finished; outputs under {runner.output_dir}")
    return EXIT_OK


def main():
    """Main entry point"""
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
