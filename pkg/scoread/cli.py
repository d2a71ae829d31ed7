"""
scoread CLI.

Command-line interface for synthesizing data, training the score network,
detecting anomalies and evaluating detections.
"""

import click
import functools
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .anomaly import Combination, combine_series, fit_threshold, score_series
from .config import ConfigError, RunConfig, load_config
from .data import fit_apply_scaler, generate_synthetic_split, load_csv, save_csv, Scaler
from .evaluation import K_GRID, Objective, best_threshold_sweep, f1_pa_k_curve, quantile_grid, write_eval_csv
from .executor import WindowExecutor
from .sampler import NFE_COLUMNS
from .scorenet import init_network, load_checkpoint, read_checkpoint_header, save_checkpoint
from .trainer import train, write_loss_history
from .workspace import RunWorkspace, read_csv_header, read_results_csv, write_csv
from . import __version__


# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)


def run_options(fn):
    """Options shared by every command."""
    @click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
                  help="Config file of key=value lines")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override a config key (repeatable)")
    @click.option("--seed", type=int, default=None, help="Global seed")
    @click.option("--workers", type=int, default=None, help="Parallel detection workers")
    @click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory")
    @click.option("--verbose", "-v", is_flag=True, help="Verbose output")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, seed, workers, out, verbose, **kwargs):
        if verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        try:
            config = load_config(config_path, overrides, seed=seed, workers=workers, out=out)
        except ConfigError as e:
            fail("Configuration", e)
        return fn(config, **kwargs)
    return wrapper


def fail(action: str, error: Exception):
    """Report an error and exit: 1 for bad input, 2 for runtime failures."""
    logger.error(f"{action} failed: {error}")
    click.secho(f"Error: {error}", fg="red", err=True)
    sys.exit(1 if isinstance(error, (ValueError, FileNotFoundError)) else 2)


def record(workspace: RunWorkspace, command: str, config: RunConfig, *outputs: Path):
    workspace.record_command(
        command, config.to_dict(), config.config_hash(), config.seed, __version__, list(outputs)
    )


@click.group()
@click.version_option(version=__version__)
def cli():
    """scoread - Score-based anomaly detection for multivariate time series."""
    pass


@cli.command()
@run_options
def synth(config: RunConfig):
    """Write a synthetic train/test pair with labelled anomalies."""
    try:
        workspace = RunWorkspace(config.out)
        train_series, test_series, test_clean = generate_synthetic_split(config.synth)
        header = config.provenance() + [
            f"process={config.synth.process.value}",
            f"anomaly_kind={config.synth.anomaly_kind.value}",
        ]
        paths = [workspace.data_path(name) for name in ("train", "test", "test_clean")]
        save_csv(train_series, paths[0], header, include_labels=False)
        save_csv(test_series, paths[1], header, include_labels=True)
        save_csv(test_clean, paths[2], header, include_labels=False)
        record(workspace, "synth", config, *paths)

        click.echo(f"✓ Train series: {paths[0]} (T={train_series.length}, m={train_series.dim})")
        click.echo(f"✓ Test series:  {paths[1]} ({int(test_series.labels.sum())} anomalous steps)")
        click.echo(f"✓ Clean test:   {paths[2]}")
    except Exception as e:
        fail("Synthesis", e)


@cli.command(name="train")
@click.option("--train", "train_path", type=click.Path(path_type=Path), default=None,
              help="Training CSV (overrides data.train)")
@run_options
def train_cmd(config: RunConfig, train_path: Optional[Path]):
    """Train the conditional score network on a clean series."""
    if train_path is not None:
        config.data.train = train_path
    try:
        config.require_paths("train")
    except ConfigError as e:
        fail("Configuration", e)

    try:
        series = load_csv(config.data.train, label_column=config.data.label_column)
        scaler, scaled, _ = fit_apply_scaler(series)
        workspace = RunWorkspace(config.out)

        net = init_network(replace(config.net, m=series.dim))
        click.echo(f"✓ Network: {net.parameter_count()} parameters, window={config.omega + 1}x{series.dim}")
        net, history = train(
            net, scaled, config.train, config.sde.build(),
            checkpoint_dir=workspace.checkpoints_dir,
        )

        save_checkpoint(net, workspace.model_path, extra={
            "config_hash": config.config_hash(),
            "scaler": scaler.to_dict(),
            "seed": config.seed,
        })
        workspace.save_scaler(scaler)
        write_loss_history(workspace.losses_path, history, config.provenance())
        record(workspace, "train", config, workspace.model_path, workspace.losses_path)

        click.echo(f"✓ Checkpoint: {workspace.model_path}")
        click.echo(f"✓ Loss history: {workspace.losses_path} ({len(history)} rows)")
        if history:
            click.echo(f"  final loss {history[-1].total:.4f}")
    except Exception as e:
        fail("Training", e)


def _checkpoint_scaler(checkpoint: Path, workspace: RunWorkspace) -> Scaler:
    extra = read_checkpoint_header(checkpoint).get("extra", {})
    if "scaler" in extra:
        return Scaler.from_dict(extra["scaler"])
    return workspace.load_scaler(checkpoint.parent / "scaler.json")


@cli.command()
@click.option("--test", "test_path", type=click.Path(path_type=Path), default=None,
              help="Test CSV (overrides data.test)")
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None,
              help="Model checkpoint (default: <out>/model.bin)")
@run_options
def detect(config: RunConfig, test_path: Optional[Path], checkpoint: Optional[Path]):
    """Score every evaluable time step of a test series."""
    if test_path is not None:
        config.data.test = test_path
    try:
        config.require_paths("test")
    except ConfigError as e:
        fail("Configuration", e)

    try:
        workspace = RunWorkspace(config.out)
        checkpoint = Path(checkpoint) if checkpoint is not None else workspace.model_path
        net = load_checkpoint(checkpoint)
        if net.config.omega != config.omega:
            raise ConfigError(
                f"checkpoint {checkpoint} was trained with omega={net.config.omega}, "
                f"config has omega={config.omega}"
            )
        scaler = _checkpoint_scaler(checkpoint, workspace)

        test = load_csv(config.data.test, label_column=config.data.label_column)
        if test.dim != net.config.m:
            raise ConfigError(
                f"checkpoint {checkpoint} expects m={net.config.m} features, "
                f"{config.data.test} has {test.dim}"
            )
        test = scaler.apply(test)

        schedule = config.sde.build()
        executor = WindowExecutor(workers=config.workers)
        threshold, prob_offset = None, None
        if config.detector.threshold is None and config.data.train is not None and Path(config.data.train).exists():
            train_series = scaler.apply(load_csv(config.data.train, label_column=config.data.label_column))
            fit = fit_threshold(net, schedule, train_series, config.detector, executor)
            threshold, prob_offset = fit.threshold, fit.prob_offset

        result = score_series(net, schedule, test, config.detector, executor, threshold, prob_offset)

        header = config.provenance() + [
            f"tau={result.tau}",
            f"combination={result.combination.value}",
            f"threshold={result.threshold:.10g}",
            f"prob_offset={result.prob_offset:.17g}",
        ]
        write_csv(workspace.anomaly_path, result.columns(), result.to_rows(), header)
        write_csv(workspace.nfe_path, NFE_COLUMNS, result.nfe.rows(), config.provenance())
        record(workspace, "detect", config, workspace.anomaly_path, workspace.nfe_path)

        click.echo(f"✓ Scored {len(result)} steps: {int(result.predicted.sum())} flagged "
                   f"(threshold {result.threshold:.6g})")
        click.echo(f"✓ Measurements: {workspace.anomaly_path}")
        click.echo(f"✓ NFE statistics: {workspace.nfe_path}")
    except Exception as e:
        fail("Detection", e)


def _mode_scores(frame, header, mode: Optional[Combination]):
    """Scores of one combination mode; None keeps the combined column from detect."""
    if mode is None:
        return frame["combined"].to_numpy(), header.get("combination", "combined")
    missing = {"recon", "prob", "grad"} - set(frame.columns)
    if missing:
        raise ValueError(f"cannot recombine: missing columns {sorted(missing)}")
    offset = header.get("prob_offset")
    scores = combine_series(
        frame["recon"].to_numpy(dtype=float),
        frame["prob"].to_numpy(dtype=float),
        frame["grad"].to_numpy(dtype=float),
        mode,
        float(offset) if offset is not None else None,
    )
    return scores, mode.value


@cli.command()
@click.option("--anomaly", "anomaly_path", type=click.Path(path_type=Path), default=None,
              help="Anomaly CSV from detect (default: <out>/results/anomaly.csv)")
@click.option("--objective", type=click.Choice([o.value for o in Objective]), default=Objective.F1_PA.value,
              help="Quantity maximized by the threshold sweep")
@click.option("--grid-size", type=int, default=100, help="Number of score quantiles swept")
@click.option("--combination", type=click.Choice([c.value for c in Combination] + ["all"]), default=None,
              help="Recombine recon/prob/grad under one mode, or every mode, before the sweep")
@run_options
def evaluate(config: RunConfig, anomaly_path: Optional[Path], objective: str, grid_size: int,
             combination: Optional[str]):
    """Compute F1, F1_PA and the PA%K curve of a detection run."""
    try:
        workspace = RunWorkspace(config.out)
        anomaly_path = Path(anomaly_path) if anomaly_path is not None else workspace.anomaly_path
        frame = read_results_csv(anomaly_path)
        if "label" not in frame.columns:
            raise ValueError(f"{anomaly_path} has no label column; cannot evaluate")
        labels = frame["label"].to_numpy()
        if labels.sum() == 0:
            logger.warning(f"{anomaly_path} contains no anomalous steps")
        source = read_csv_header(anomaly_path)
        detected = source.get("threshold")

        if combination == "all":
            modes = list(Combination)
        else:
            modes = [Combination(combination) if combination is not None else None]

        rows = []
        chosen = None
        for mode in modes:
            scores, name = _mode_scores(frame, source, mode)
            _, best = best_threshold_sweep(
                scores, labels, Objective(objective), quantile_grid(scores, grid_size)
            )
            rows.append((name, "best", best))
            if detected is not None and name == source.get("combination", name):
                rows.append((name, "detect", f1_pa_k_curve(scores, labels, float(detected), K_GRID)))
            if chosen is None or best.objective(objective) > chosen[1].objective(objective):
                chosen = (name, best)

        name, best = chosen
        header = config.provenance() + [
            f"objective={objective}", f"combination={name}", f"source={anomaly_path}",
        ]
        write_eval_csv(workspace.eval_path, best, header)
        record(workspace, "evaluate", config, workspace.eval_path)

        click.echo(f"\n{'MODE':<6} {'THRESHOLD':<10} {'VALUE':<14} {'F1':<8} {'F1_PA':<8} {'AUC':<8}")
        click.echo("-" * 59)
        for mode_name, kind, result in rows:
            s = result.summary()
            click.echo(f"{mode_name:<6} {kind:<10} {s['threshold']:<14.6g} {s['f1']:<8.4f} "
                       f"{s['f1_pa']:<8.4f} {s['auc']:<8.4f}")
        click.echo(f"\n✓ PA%K curve ({name}): {workspace.eval_path}")
    except Exception as e:
        fail("Evaluation", e)


def main():
    """Main entry point."""
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        click.secho("Aborted", fg="red", err=True)
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(1)


if __name__ == "__main__":
    main()
