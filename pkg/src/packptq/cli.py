"""Thin-client CLI: every subcommand talks to the service API.

By default requests run against an in-process app instance (no network);
pass --server URL to target a running `packptq serve`. Exit codes:
0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__
from .config import apply_overrides
from .errors import ConfigError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class _InProcessClient:
    """Synchronous facade over httpx's ASGI transport (no sockets involved)."""

    def __init__(self):
        import httpx

        from .service.app import app

        self._client = httpx.AsyncClient(
            transport=httpx.ASGITransport(app=app), base_url="http://packptq.internal"
        )

    def post(self, route: str, json: dict):
        import asyncio

        return asyncio.run(self._client.post(route, json=json))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        import asyncio

        asyncio.run(self._client.aclose())
        return False


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    return _InProcessClient()


def _load_config_dict(config_path: str | None, seed: int | None, out: str | None,
                      overrides: tuple[str, ...]) -> dict:
    if config_path is None:
        raise ConfigError("--config PATH is required")
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    raw = apply_overrides(raw, list(overrides))
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out_dir"] = out
    return raw


def _post(server: str | None, route: str, payload: dict) -> int:
    with _client(server) as client:
        resp = client.post(route, json=payload)
    if resp.status_code == 200:
        click.echo(json.dumps(resp.json(), indent=2, sort_keys=True))
        return 0
    try:
        body = resp.json()
    except ValueError:
        body = {"error": "internal", "message": resp.text}
    message = body.get("message") or json.dumps(body)
    click.echo(f"error: {message}", err=True)
    if resp.status_code in (400, 422):
        return EXIT_CONFIG
    if body.get("error") == "numerical":
        return EXIT_NUMERICAL
    return 1


def _run_stage(route: str, config, seed, out, override, server) -> None:
    try:
        raw = _load_config_dict(config, seed, out, override)
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(_post(server, route, {"config": raw}))


def _stage_command(name: str, route: str):
    @main.command(name=name)
    @click.option("--config", type=str, required=False, help="Path to the run config JSON.")
    @click.option("--seed", type=int, default=None, help="Override the run seed.")
    @click.option("--out", type=str, default=None, help="Override the output directory.")
    @click.option("--override", multiple=True, metavar="KEY=VALUE",
                  help="Dotted-path config override, value parsed as JSON.")
    @click.option("--server", type=str, default=None,
                  help="Remote service URL (default: in-process).")
    def _cmd(config, seed, out, override, server):
        _run_stage(route, config, seed, out, override, server)

    _cmd.__name__ = f"cmd_{name.replace('-', '_')}"
    return _cmd


@click.group()
@click.version_option(__version__)
def main():
    """Pack-wise post-training quantization toolkit."""


for _name, _route in [
    ("score", "/run/score"),
    ("pack", "/run/pack"),
    ("allocate", "/run/allocate"),
    ("quantize", "/run/quantize"),
    ("reconstruct", "/run/reconstruct"),
    ("eval", "/run/eval"),
    ("pipeline", "/run/pipeline"),
]:
    _stage_command(_name, _route)


@main.command()
@click.option("--config", type=str, required=False)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, default=None)
@click.option("--override", multiple=True, metavar="KEY=VALUE")
@click.option("--server", type=str, default=None)
@click.option("--seeds", type=str, default=None,
              help="Comma-separated seed list (default 0,1,2,3,4).")
@click.option("--grid", type=str, default=None,
              help="Comma-separated cells like 'hada-mp,none-uniform' (default: full grid).")
def ablate(config, seed, out, override, server, seeds, grid):
    """Run the packing x precision ablation grid."""
    try:
        raw = _load_config_dict(config, seed, out, override)
        payload: dict = {"config": raw}
        if seeds:
            payload["seeds"] = [int(s) for s in seeds.split(",")]
        if grid:
            cells = []
            for cell in grid.split(","):
                strategy, _, precision = cell.partition("-")
                if precision not in ("uniform", "mp"):
                    raise ConfigError(f"bad grid cell '{cell}'; use STRATEGY-uniform|mp")
                cells.append((strategy, precision == "mp"))
            payload["grid"] = cells
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(_post(server, "/run/ablate", payload))


@main.command(name="gen-data")
@click.option("--kind", type=str, default="gaussian-blobs")
@click.option("--n", type=int, default=256)
@click.option("--test-n", type=int, default=2048)
@click.option("--data-seed", type=int, default=11)
@click.option("--class-count", type=int, default=None)
@click.option("--dim", type=int, default=2)
@click.option("--out-path", type=str, required=True)
@click.option("--server", type=str, default=None)
def gen_data(kind, n, test_n, data_seed, class_count, dim, out_path, server):
    """Generate a dataset document."""
    spec = {"kind": kind, "n": n, "test_n": test_n, "seed": data_seed, "dim": dim}
    if class_count is not None:
        spec["class_count"] = class_count
    sys.exit(_post(server, "/datasets/generate", {"spec": spec, "out_path": out_path}))


@main.command(name="gen-model")
@click.option("--config", type=str, required=False)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, default=None)
@click.option("--override", multiple=True, metavar="KEY=VALUE")
@click.option("--out-path", type=str, required=True)
@click.option("--server", type=str, default=None)
def gen_model(config, seed, out, override, out_path, server):
    """Build (and train) a model from the config's train section."""
    try:
        raw = _load_config_dict(config, seed, out, override)
    except ConfigError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(_post(server, "/models/build", {"config": raw, "out_path": out_path}))


@main.command()
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--port", type=int, default=8100)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
