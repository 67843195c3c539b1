"""Bundled planting demo fixtures: device roster, metamodels, rules, scenario."""

from importlib import resources
from pathlib import Path


def fixture_path(name: str) -> Path:
    """Filesystem path of a bundled fixture (fixtures ship as real files)."""
    path = Path(str(resources.files("modelhome.fixtures").joinpath(name)))
    if not path.exists():
        raise FileNotFoundError(f"no bundled fixture {name!r}")
    return path


def fixture_text(name: str) -> str:
    return fixture_path(name).read_text()
