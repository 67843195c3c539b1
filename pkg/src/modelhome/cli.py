"""Command line entry points.

Exit codes are frozen for CI: 0 success, 1 I/O problems (missing or
unreadable files), 2 validation problems (parse errors, type errors, bad
config values).
"""

from __future__ import annotations

import sys
import threading
from pathlib import Path

import click

from . import __version__
from .fixtures import fixture_path
from .host import (
    ConfigError,
    EXIT_IO,
    EXIT_VALIDATION,
    Host,
    HostConfig,
    load_documents,
)


def _fail(exc: ConfigError) -> None:
    for diag in exc.diagnostics:
        click.echo(f"error: {diag}", err=True)
    if not exc.diagnostics:
        click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


@click.group()
def main():
    """Runtime-model home automation host and tooling."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Host config JSON; defaults to the bundled demo.")
@click.option("--tick-ms", type=int, default=None, help="Override tick period.")
@click.option("--api-host", default=None, help="Override API bind host.")
@click.option("--api-port", type=int, default=None, help="Override API port.")
@click.option("--test-mode", is_flag=True, default=None,
              help="Disable the wall-clock loop; ticks via POST /api/tick.")
def serve(config_path, tick_ms, api_host, api_port, test_mode):
    """Run the closed-loop host with the HTTP API."""
    import uvicorn

    from .api import build_app

    overrides = {
        "tick_ms": tick_ms,
        "api_host": api_host,
        "api_port": api_port,
        "test_mode": test_mode,
    }
    try:
        if config_path is None:
            config_path = fixture_path("demo.json")
        config = HostConfig.load(config_path, overrides)
        host = Host(config)
    except ConfigError as exc:
        _fail(exc)
        return
    app = build_app(host)
    if not config.test_mode:
        ticker = threading.Thread(target=host.run_forever, name="tick-loop", daemon=True)
        ticker.start()
    try:
        uvicorn.run(app, host=config.api_host, port=config.api_port, log_level="warning")
    finally:
        host.stop()


@main.command()
@click.argument("roster", type=click.Path())
@click.argument("rules", type=click.Path())
@click.argument("scenario", type=click.Path())
@click.option("--runtime-metamodel", type=click.Path(), default=None,
              help="Runtime metamodel definition; defaults to the bundled one.")
def validate(roster, rules, scenario, runtime_metamodel):
    """Validate the startup documents without running anything."""
    if runtime_metamodel is None:
        runtime_metamodel = fixture_path("runtime_metamodel.mm")
    try:
        load_documents(roster, rules, scenario, runtime_metamodel)
    except ConfigError as exc:
        _fail(exc)
        return
    click.echo("ok: all documents valid")


@main.command()
def version():
    """Print the package version."""
    click.echo(__version__)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Host config JSON; defaults to the bundled demo.")
@click.option("--ticks", type=int, default=960, show_default=True,
              help="How many ticks to simulate.")
@click.option("--out", "out_dir", type=click.Path(), default="report",
              show_default=True, help="Output directory.")
def report(config_path, ticks, out_dir):
    """Run the embedded demo headless and write telemetry plus figures."""
    from .report import write_report

    if ticks <= 0:
        click.echo("error: --ticks must be positive", err=True)
        sys.exit(EXIT_VALIDATION)
    try:
        if config_path is None:
            config_path = fixture_path("demo.json")
        config = HostConfig.load(config_path, {"test_mode": True})
        host = Host(config)
    except ConfigError as exc:
        _fail(exc)
        return
    try:
        paths = write_report(host, ticks, Path(out_dir))
    except OSError as exc:
        click.echo(f"error: cannot write report: {exc}", err=True)
        sys.exit(EXIT_IO)
    for p in paths:
        click.echo(str(p))


if __name__ == "__main__":
    main()
