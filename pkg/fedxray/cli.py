import shutil
import sys
from pathlib import Path

import click
import yaml

from fedxray import constants
from fedxray.config import ConfigError, parse_config_with_raw
from fedxray.loggers import setup_logger
from fedxray.results import CONFIG_FILE, RunManifest, RunWriter, _now, write_scatter
from fedxray.simulation import run_experiment, screening_benchmark
from fedxray.utils import sha256_file

logger = setup_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2


def _store_config(config_path: Path, raw, seed: int | None, run_dir: Path) -> Path:
    stored = run_dir / CONFIG_FILE
    if seed is None:
        if stored.resolve() != config_path.resolve():
            shutil.copyfile(config_path, stored)
    else:
        stored.write_text(yaml.safe_dump(raw, sort_keys=False), encoding="utf-8")
    return stored


def run(config_path, out_dir, seed: int | None = None) -> int:
    """Runs one experiment into out_dir and returns the process exit status."""
    config_path, out_dir = Path(config_path), Path(out_dir)
    try:
        config, raw = parse_config_with_raw(config_path, seed)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG_ERROR

    try:
        writer = RunWriter(out_dir, config.output.record_timing)
        stored = _store_config(config_path, raw, seed, out_dir)
        manifest = RunManifest(str(config_path), sha256_file(stored), config.seed, outputs=writer.outputs)
        manifest.write(out_dir)
    except OSError as e:
        click.echo(f"cannot write to {out_dir}: {e}", err=True)
        return EXIT_RUNTIME_ERROR

    status = EXIT_OK
    try:
        run_experiment(config, sinks=[writer])
        manifest.status = "complete"
    except Exception as e:
        logger.debug("run failed", exc_info=True)
        click.echo(f"run failed after {writer.rounds} rounds: {type(e).__name__}: {e}", err=True)
        manifest.status = "partial" if writer.rounds else "failed"
        status = EXIT_RUNTIME_ERROR
    manifest.finished_at = _now()
    manifest.write(out_dir)
    return status


@click.group()
@click.version_option(constants.VERSION)
def cli():
    """Federated learning robustness simulator."""


@cli.command("run")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="run directory")
@click.option("--seed", type=int, default=None, help="overrides the seed of the experiment file")
def run_command(config, out_dir, seed):
    """Run the experiment described by CONFIG."""
    sys.exit(run(config, out_dir, seed))


@cli.command("bench")
@click.option("--tau", type=int, default=constants.CLIENTS_PER_ROUND, show_default=True)
@click.option("--zeta", type=int, default=1_000_000, show_default=True)
@click.option("--classes", "M", type=int, default=10, show_default=True)
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--aggregators", default=",".join(constants.AGGREGATORS), show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="also write the table as CSV")
def bench_command(tau, zeta, M, repeats, seed, aggregators, out_path):
    """Time the screening phase of each aggregator on random updates."""
    kinds = [kind.strip() for kind in aggregators.split(",") if kind.strip()]
    unknown = [kind for kind in kinds if kind not in constants.AGGREGATORS]
    if unknown:
        click.echo(f"config error: unknown aggregators {unknown}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    try:
        table = screening_benchmark(kinds, tau, zeta, M, repeats, seed)
    except ValueError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    except Exception as e:
        click.echo(f"benchmark failed: {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_RUNTIME_ERROR)
    click.echo(table.to_string(index=False))
    if out_path is not None:
        table.to_csv(out_path, index=False)
    sys.exit(EXIT_OK)


@cli.command("export-scatter")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--round", "t", type=int, required=True)
@click.option("--space", type=click.Choice(["slous", "updates"]), default="slous", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def export_scatter_command(run_dir, t, space, out_path):
    """Write the 2-D PCA scatter of one round as CSV."""
    try:
        path = write_scatter(run_dir, t, space, out_path)
    except ValueError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    except (OSError, KeyError) as e:
        click.echo(f"cannot read diagnostics in {run_dir}: {e}", err=True)
        sys.exit(EXIT_RUNTIME_ERROR)
    click.echo(str(path))
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    cli()
