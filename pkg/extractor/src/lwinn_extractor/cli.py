"""Command-line entry point for offline feature extraction."""

from __future__ import annotations

import click

from .extract import WeightsError, load_extract_config
from .pipeline import run_extraction


@click.command()
@click.option("--input-dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Dataset category directory (train/good, test/<kind>, ground_truth).")
@click.option("--output-dir", required=True, type=click.Path(file_okay=False),
              help="Destination for bundles, masks, and manifests.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Plain-text key = value extraction config.")
def main(input_dir: str, output_dir: str, config_path: str | None) -> None:
    """Extract residual-network feature bundles from a dataset category."""
    try:
        cfg = load_extract_config(config_path)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"bad config: {exc}") from exc
    try:
        manifests = run_extraction(input_dir, output_dir, cfg)
    except WeightsError as exc:
        raise click.ClickException(str(exc)) from exc
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    for split, path in sorted(manifests.items()):
        click.echo(f"{split} manifest = {path}")


if __name__ == "__main__":
    main()
