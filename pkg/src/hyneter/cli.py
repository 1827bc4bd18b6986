"""Command-line client for the service.

Every subcommand talks HTTP: by default to an in-process application
instance, or to a running server via --server.  Output is JSON on stdout
(or raw CSV for `sweep` without --out) so results are machine-parseable;
exit status reflects the outcome of the command's check.
"""
from __future__ import annotations

import base64
import json
import sys

import click
import httpx


def _client(server):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient
    from .service import create_app
    return TestClient(create_app())


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


def _call(client, method: str, path: str, **kwargs) -> dict:
    response = client.request(method, path, **kwargs)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        click.echo(json.dumps({"error": detail}), err=True)
        sys.exit(1)
    return response.json()


def _config_payload(variant, config_path) -> dict:
    if variant and config_path:
        raise click.UsageError("pass either --variant or --config, not both")
    if config_path:
        with open(config_path, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise click.UsageError(
                    f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise click.UsageError("config top level must be an object")
        return raw
    if variant:
        return {"variant": variant}
    raise click.UsageError("one of --variant or --config is required")


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise click.UsageError(
            f"--values must be comma-separated numbers: {exc}") from exc


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Base URL of a running service; default is in-process.")
@click.pass_context
def main(ctx, server):
    """Hybrid backbone toolkit: build, audit, train, and sweep models."""
    ctx.obj = server


@main.command()
@click.option("--variant", default=None, help="Variant name, e.g. micro.")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True), help="JSON config file.")
@click.option("--seed", default=0, show_default=True)
@click.pass_obj
def build(server, variant, config_path, seed):
    """Build a model and print its config and parameter count."""
    with _client(server) as client:
        out = _call(client, "POST", "/models",
                    json={"config": _config_payload(variant, config_path),
                          "seed": seed})
    _echo_json(out)


@main.command()
@click.option("--variant", default=None)
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True))
@click.option("--checkpoint", default=None, type=click.Path(exists=True),
              help="Restore weights from a checkpoint instead of seeding.")
@click.option("--seed", default=0, show_default=True,
              help="Weight initialization seed.")
@click.option("--image-seed", default=0, show_default=True)
@click.option("--batch", default=2, show_default=True)
@click.pass_obj
def forward(server, variant, config_path, checkpoint, seed, image_seed,
            batch):
    """Run a random batch through the model and audit stage shapes."""
    if checkpoint:
        with open(checkpoint, "rb") as f:
            build_body = {"checkpoint_b64":
                          base64.b64encode(f.read()).decode()}
    else:
        build_body = {"config": _config_payload(variant, config_path),
                      "seed": seed}
    with _client(server) as client:
        built = _call(client, "POST", "/models", json=build_body)
        out = _call(client, "POST", f"/models/{built['name']}/forward",
                    json={"image_seed": image_seed, "batch": batch})
        _call(client, "DELETE", f"/models/{built['name']}")
    _echo_json(out)
    sys.exit(0 if out["audit_passed"] else 1)


@main.command()
@click.option("--model", "variant", default="micro", show_default=True,
              help="Variant to check.")
@click.option("--seed", default=0, show_default=True,
              help="Seed for both the weights and the sampled coordinates.")
@click.option("--samples", default=120, show_default=True)
@click.option("--tolerance", default=1e-3, show_default=True)
@click.pass_obj
def gradcheck(server, variant, seed, samples, tolerance):
    """Compare analytic gradients with finite differences; exit 0 on pass."""
    with _client(server) as client:
        built = _call(client, "POST", "/models",
                      json={"config": {"variant": variant}, "seed": seed})
        out = _call(client, "POST", f"/models/{built['name']}/gradcheck",
                    json={"samples": samples, "seed": seed,
                          "tolerance": tolerance})
    _echo_json(out)
    sys.exit(0 if out["passed"] else 1)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True),
              help="JSON config with model fields plus train/task sections.")
@click.option("--seed", default=0, show_default=True,
              help="Weight initialization seed.")
@click.option("--out", default=None, type=click.Path(),
              help="Write the trained checkpoint here.")
@click.option("--eval-every", default=0, show_default=True)
@click.pass_obj
def train(server, config_path, seed, out, eval_every):
    """Train on the synthetic task; exit 0 unless training aborted."""
    raw = _config_payload(None, config_path)
    sections = {k: raw.pop(k) for k in ("train", "task") if k in raw}
    with _client(server) as client:
        built = _call(client, "POST", "/models",
                      json={"config": raw, "seed": seed})
        result = _call(client, "POST", f"/models/{built['name']}/train",
                       json={"config": sections, "eval_every": eval_every,
                             "return_checkpoint": out is not None})
    if out is not None and result.get("checkpoint_b64"):
        with open(out, "wb") as f:
            f.write(base64.b64decode(result["checkpoint_b64"]))
    summary = {
        "steps_run": result["steps_run"],
        "first_loss": result["losses"][0] if result["losses"] else None,
        "final_loss": result["losses"][-1] if result["losses"] else None,
        "final_metrics": result["final_metrics"],
        "evals": result["evals"],
        "aborted": result["aborted"],
        "checkpoint": out,
    }
    _echo_json(summary)
    sys.exit(1 if result["aborted"] else 0)


@main.command()
@click.option("--factor", required=True,
              type=click.Choice(["CL", "TB", "NT", "delta"]))
@click.option("--values", required=True,
              help="Comma-separated factor values, e.g. 1.0,1.5,2.0.")
@click.option("--variant", default=None)
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path(),
              help="Write CSV here; otherwise CSV goes to stdout.")
@click.pass_obj
def sweep(server, factor, values, variant, config_path, out):
    """Sweep one factor; exit 0 only if every point completed."""
    body = {"factor": factor, "values": _parse_values(values),
            "config": _config_payload(variant, config_path)}
    with _client(server) as client:
        result = _call(client, "POST", "/sweep", json=body)
    if out is None:
        click.echo(result["csv_text"], nl=False)
    else:
        with open(out, "wb") as f:
            f.write(result["csv_text"].encode("utf-8"))
        _echo_json({"rows": len(result["records"]), "csv": out,
                    "error": result["error"]})
    if result["error"]:
        click.echo(json.dumps({"error": result["error"]}), err=True)
        sys.exit(1)


@main.command()
@click.option("--variants", default="1.0,plus,max", show_default=True,
              help="Comma-separated variant names; ratios are vs the first.")
@click.pass_obj
def params(server, variants):
    """Print parameter counts and size ratios between variants."""
    with _client(server) as client:
        out = _call(client, "GET", "/params",
                    params={"variants": variants})
    _echo_json(out)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn
    from .service import create_app
    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
