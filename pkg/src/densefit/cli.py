"""Command-line interface: a thin client for the densefit service.

By default the CLI talks to the app in-process; pass --server URL to target a
running instance instead. Model/scene documents are written client-side;
experiment outputs are written by the service into --out.
"""

from __future__ import annotations

import json
from pathlib import Path

import click


def _client(server: str | None):
    if server:
        import httpx
        return httpx.Client(base_url=server, timeout=None)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from fastapi.testclient import TestClient
    from .service.app import app
    return TestClient(app)


def _post(server: str | None, path: str, payload: dict) -> dict:
    with _client(server) as client:
        response = client.post(path, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        raise click.ClickException(f"{path} failed ({response.status_code}): {detail}")
    return response.json()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot read config {path}: {exc}")


def _print_summary(summary: dict) -> None:
    providers = summary.get("providers", {})
    if providers:
        click.echo(f"{'provider':<24} {'pre PVE':>10} {'post PVE':>10} "
                   f"{'post MPJPE':>11} {'EPE':>8} {'errors':>7}")
        for label, entry in providers.items():
            def cell(key, width):
                value = entry.get(key)
                return f"{value:>{width}.2f}" if value is not None else " " * (width - 1) + "-"
            click.echo(f"{label:<24} {cell('pre_pve_median', 10)} {cell('post_pve_median', 10)} "
                       f"{cell('post_mpjpe_median', 11)} {cell('epe_median', 8)} "
                       f"{entry.get('errors', 0):>7}")
    if "noise" in summary:
        sweep = summary["noise"]["sweep"]
        flag = "yes" if summary["noise"]["non_decreasing"] else "NO"
        click.echo("noise sweep (sigma -> post PVE median): "
                   + ", ".join(f"{m['sigma']:g} -> {m['post_pve_median']:.2f}"
                               for m in sweep if m["post_pve_median"] is not None))
        click.echo(f"monotone non-decreasing: {flag}")
    if "modes" in summary:
        click.echo(f"{'mode':<16} {'render L1':>10} {'texture RMSE':>13} {'coverage':>9}")
        for mode, entry in summary["modes"].items():
            click.echo(f"{mode:<16} {entry['render_l1_median']:>10.5f} "
                       f"{entry['texture_rmse_median']:>13.5f} {entry['coverage_median']:>9.3f}")
    if "error_count" in summary:
        click.echo(f"total errors: {summary['error_count']}")


server_option = click.option("--server", default=None,
                             help="Base URL of a running service; default runs in-process.")
seed_option = click.option("--seed", type=int, default=None, help="Master seed override.")
config_option = click.option("--config", "config_path", type=click.Path(exists=True),
                             default=None, help="Experiment config JSON.")
jobs_option = click.option("--jobs", type=int, default=1, help="Parallel scene workers.")


@click.group()
def main() -> None:
    """Refine body-mesh estimates against dense 2D displacement fields."""


@main.command("gen-model")
@click.option("--joints", type=int, default=16)
@click.option("--verts-per-segment", type=int, default=24)
@click.option("--blendshapes", type=int, default=10)
@click.option("--keypoints", type=int, default=25)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(), help="Output model JSON.")
@server_option
def gen_model(joints, verts_per_segment, blendshapes, keypoints, seed, out, server):
    """Generate a synthetic body model and write its JSON document."""
    payload = {"joints": joints, "vertices_per_segment": verts_per_segment,
               "blendshapes": blendshapes, "keypoints": keypoints, "seed": seed}
    data = _post(server, "/model/generate", payload)
    Path(out).write_text(json.dumps(data["model"]), encoding="utf-8")
    click.echo(f"wrote {out}: N={data['vertex_count']} J={data['joint_count']} "
               f"T_f={data['face_count']}")


@main.command("gen-scenes")
@config_option
@seed_option
@click.option("--count", type=int, default=None, help="Scene count override.")
@click.option("--out", required=True, type=click.Path(), help="Output scenes JSON.")
@server_option
def gen_scenes(config_path, seed, count, out, server):
    """Materialize the synthetic scene set for a config."""
    payload = {"config": _load_config(config_path), "seed": seed, "count": count}
    data = _post(server, "/scenes/generate", payload)
    Path(out).write_text(json.dumps(data["scenes"]), encoding="utf-8")
    click.echo(f"wrote {out}: {data['count']} scenes")


def _run_experiment_command(endpoint: str, config_path, seed, out, jobs, server,
                            extra: dict | None = None) -> None:
    payload = {"config": _load_config(config_path), "seed": seed,
               "out_dir": str(Path(out).resolve()), "jobs": jobs}
    payload.update(extra or {})
    data = _post(server, endpoint, payload)
    _print_summary(data["summary"])
    for path in data["written"]:
        click.echo(f"wrote {path}")
    if data["error_count"]:
        raise SystemExit(1)


@main.command("fit")
@config_option
@seed_option
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@jobs_option
@server_option
def fit_cmd(config_path, seed, out, jobs, server):
    """Run the refinement experiment: per scene x provider, fit and evaluate.

    Exit code is 0 iff no scene errored."""
    _run_experiment_command("/experiments/fit", config_path, seed, out, jobs, server)


@main.command("ablate-noise")
@config_option
@seed_option
@click.option("--sigmas", default="0,2,5,10", help="Comma-separated noise sigmas (px).")
@click.option("--out", required=True, type=click.Path())
@jobs_option
@server_option
def ablate_noise_cmd(config_path, seed, sigmas, out, jobs, server):
    """Provider-noise sweep with a monotonicity summary."""
    try:
        sigma_list = [float(s) for s in sigmas.split(",") if s.strip() != ""]
    except ValueError:
        raise click.ClickException(f"bad --sigmas value: {sigmas}")
    _run_experiment_command("/experiments/ablate-noise", config_path, seed, out, jobs,
                            server, extra={"sigmas": sigma_list})


@main.command("ablate-texture")
@config_option
@seed_option
@click.option("--modes", default=None, help="Comma-separated texture modes.")
@click.option("--out", required=True, type=click.Path())
@jobs_option
@server_option
def ablate_texture_cmd(config_path, seed, modes, out, jobs, server):
    """Texture perturbation study (render + back-projection degradation)."""
    mode_list = [m.strip() for m in modes.split(",")] if modes else None
    _run_experiment_command("/experiments/ablate-texture", config_path, seed, out, jobs,
                            server, extra={"modes": mode_list})


@main.command("report")
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Write summary JSON here.")
@server_option
def report_cmd(csv_path, out, server):
    """Aggregate a results CSV into per-provider medians/means."""
    csv_text = Path(csv_path).read_text(encoding="utf-8")
    data = _post(server, "/reports/summarize", {"csv": csv_text})
    _print_summary(data["summary"])
    if out:
        Path(out).write_text(json.dumps(data["summary"], sort_keys=True, indent=1),
                             encoding="utf-8")
        click.echo(f"wrote {out}")


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the densefit service."""
    import uvicorn
    from .service.app import app
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
