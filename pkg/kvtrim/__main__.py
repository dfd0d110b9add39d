import logging
from typing import Optional

import typer

from kvtrim.config import get_settings
from kvtrim.exceptions import ConfigException
from kvtrim.logs import configure_logging
from kvtrim.pipeline import EXIT_CONFIG, cmd_analyze, cmd_report, cmd_run

logger = logging.getLogger("kvtrim")

app = typer.Typer(help="Compress per-head KV caches and account for their memory.")

CONFIG_ARGUMENT = typer.Argument(..., help="Path to the JSON run configuration.")
OUT_OPTION = typer.Option(
    None,
    "--out",
    help="Directory for the artifacts. Falls back to output_dir of the config, then KVTRIM_OUTPUT_DIR.",
)
SEED_OPTION = typer.Option(None, "--seed", help="Replaces workload.seed of the config.")


def _finish(code: int) -> None:
    raise typer.Exit(code=code)


@app.callback()
def main():
    try:
        settings = get_settings()
    except ConfigException as e:
        configure_logging()
        logger.error(str(e))
        raise typer.Exit(code=EXIT_CONFIG)
    configure_logging(settings.log_level)


@app.command()
def run(
    config: str = CONFIG_ARGUMENT,
    out: Optional[str] = OUT_OPTION,
    seed: Optional[int] = SEED_OPTION,
):
    """
    Prefill and decode every head of the synthetic workload, then write run_report.json and
    the cache.kvtr snapshot.

    Exits 2 on an invalid configuration and 3 when the segmented decode deviates from the
    masked reference by more than the tolerance or the modeled bytes disagree with the
    constructed caches.
    """
    _finish(cmd_run(config, out=out, seed=seed))


@app.command()
def analyze(
    config: str = CONFIG_ARGUMENT,
    out: Optional[str] = OUT_OPTION,
    seed: Optional[int] = SEED_OPTION,
):
    """
    Write attention energy spectra, key/value magnitude maps and channel profiles for batch 0
    as CSV.
    """
    _finish(cmd_analyze(config, out=out, seed=seed))


@app.command()
def report(
    config: str = CONFIG_ARGUMENT,
    out: Optional[str] = OUT_OPTION,
    seed: Optional[int] = SEED_OPTION,
):
    """
    Write memory_report.json: the modeled cache bytes, a key pruning sweep with equal-memory
    budgets and, given weight and device sizes, batch headroom and peak memory.
    """
    _finish(cmd_report(config, out=out, seed=seed))


if __name__ == "__main__":
    app()
