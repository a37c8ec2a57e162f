"""Command line interface: train-toy, invert, edit, paste, eval, serve."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .errors import DragEditError, EditSpecError


@click.group()
def main() -> None:
    """Drag-and-instruct image editing with a toy diffusion backbone."""


def _load_backbone(checkpoint: str):
    from .server import load_backbone_from_env
    import torch
    torch.set_num_threads(1)
    return load_backbone_from_env(checkpoint)


checkpoint_option = click.option(
    "--checkpoint", envvar="DRAGEDIT_CHECKPOINT", default=None,
    help="Model checkpoint path (or env DRAGEDIT_CHECKPOINT).")


@main.command("train-toy")
@click.option("--out", required=True, type=click.Path(), help="Checkpoint output path.")
@click.option("--steps", default=6000, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--lr", default=2e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--timesteps", "-T", "timesteps", default=100, show_default=True,
              help="Diffusion timestep count T.")
def train_toy_cmd(out: str, steps: int, batch_size: int, lr: float, seed: int,
                  timesteps: int) -> None:
    """Train the toy denoiser on synthetic shape scenes and save a checkpoint."""
    import torch
    torch.set_num_threads(1)
    from .backbone import BackboneConfig
    from .training import TrainConfig, train_toy
    config = BackboneConfig(T=timesteps)
    train = TrainConfig(steps=steps, batch_size=batch_size, lr=lr, seed=seed)
    backbone, report = train_toy(config, train, progress=lambda s, l: click.echo(
        f"step {s}: smoothed loss {l:.4f}"))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    backbone.save(out, meta={"train_steps": report.steps,
                             "final_loss": report.final_loss, "seed": seed})
    click.echo(f"saved {out}")
    click.echo(f"loss {report.initial_loss:.4f} -> {report.final_loss:.4f} "
               f"(ratio {report.loss_ratio:.4f}, target <= {train.loss_drop_target})")


@main.command("invert")
@checkpoint_option
@click.option("--image", required=True, type=click.Path(), help="Input image (PNG).")
@click.option("--prompt", required=True, help="Source prompt describing the image.")
@click.option("--seed", default=0, show_default=True)
@click.option("--cfg-scale", default=3.5, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Trajectory archive (.npz).")
def invert_cmd(checkpoint, image, prompt, seed, cfg_scale, out) -> None:
    """Extract a noise trajectory so later edits can reuse it."""
    if not Path(image).exists():
        raise SystemExit(f"image not found: {image}")
    backbone = _load_backbone(checkpoint)
    from .images import load_image
    from .inversion import ddpm_invert, save_trajectory
    try:
        cond = backbone.encode_prompt(prompt)
        traj = ddpm_invert(backbone, load_image(image), cond, seed=seed,
                           cfg_scale=cfg_scale)
    except DragEditError as exc:
        raise SystemExit(str(exc))
    save_trajectory(traj, out)
    click.echo(f"saved trajectory ({traj.T} steps) to {out}")


def _read_spec(spec_path: str, overrides: dict):
    """Load + validate a spec file, applying flag overrides (flags win)."""
    from .pipeline import EditSpec
    path = Path(spec_path)
    if not path.exists():
        click.echo(f"error: spec file not found: {spec_path}", err=True)
        sys.exit(2)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        click.echo(f"error: spec is not valid JSON: {exc}", err=True)
        sys.exit(2)
    for key, value in overrides.items():
        if value is None:
            continue
        node = obj
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return EditSpec.from_json(obj)
    except EditSpecError as exc:
        for pointer, message in exc.violations:
            click.echo(f"error: spec{pointer or '/'}: {message}", err=True)
        sys.exit(2)


def edit_options(func):
    """Option set shared by `edit` and `paste`."""
    options = [
        checkpoint_option,
        click.option("--spec", "spec_path", required=True, type=click.Path(),
                     help="EditSpec JSON file."),
        click.option("--image", default=None, type=click.Path(),
                     help="Input image (overrides spec image_ref)."),
        click.option("--mask", default=None, type=click.Path(),
                     help="Object mask (overrides spec mask_ref)."),
        click.option("--out", required=True, type=click.Path(),
                     help="Output directory."),
        click.option("--reuse-trajectory", default=None, type=click.Path(),
                     help="Previously saved trajectory archive to skip inversion."),
        click.option("--dx", default=None, type=int, help="Override drag dx."),
        click.option("--dy", default=None, type=int, help="Override drag dy."),
        click.option("--seed", default=None, type=int, help="Override seed."),
        click.option("--t-skip", default=None, type=int, help="Override T_skip."),
        click.option("--prompt-source", default=None, help="Override source prompt."),
        click.option("--prompt-target", default=None, help="Override target prompt."),
        click.option("--control-mode", default=None,
                     type=click.Choice(["cross_attn", "mutual_self_attn", "none"]),
                     help="Override attention control mode."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _run_edit_command(checkpoint, spec_path, image, mask, out, reuse_trajectory,
                      overrides, require_paste: bool) -> None:
    backbone = _load_backbone(checkpoint)
    spec = _read_spec(spec_path, overrides)
    if require_paste and spec.mode != "paste":
        click.echo("error: spec/drag/mode: paste command requires mode 'paste'",
                   err=True)
        sys.exit(2)
    from .images import load_image, load_mask, save_image
    from .inversion import load_trajectory
    from .pipeline import run_edit

    img = load_image(image) if image else None
    m_v = load_mask(mask) if mask else None
    trajectory = None
    if reuse_trajectory:
        if not Path(reuse_trajectory).exists():
            raise SystemExit(f"trajectory not found: {reuse_trajectory}")
        trajectory = load_trajectory(reuse_trajectory)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "log.jsonl", "w") as log_file:
        def on_event(event: dict) -> None:
            event = {k: v for k, v in event.items() if k != "x0_preview"}
            log_file.write(json.dumps(event) + "\n")

        try:
            result = run_edit(backbone, spec, image=img, m_v=m_v,
                              trajectory=trajectory, on_event=on_event)
        except DragEditError as exc:
            raise SystemExit(str(exc))
    save_image(result.branch1, out_dir / "branch1.png")
    save_image(result.branch2, out_dir / "branch2.png")
    click.echo(f"wrote {out_dir}/branch1.png, branch2.png, log.jsonl")


@main.command("edit")
@edit_options
def edit_cmd(checkpoint, spec_path, image, mask, out, reuse_trajectory, dx, dy,
             seed, t_skip, prompt_source, prompt_target, control_mode) -> None:
    """Run a drag + text edit from an EditSpec JSON file."""
    overrides = {"drag.dx": dx, "drag.dy": dy, "seed": seed, "T_skip": t_skip,
                 "prompt_source": prompt_source, "prompt_target": prompt_target,
                 "control.mode": control_mode}
    _run_edit_command(checkpoint, spec_path, image, mask, out, reuse_trajectory,
                      overrides, require_paste=False)


@main.command("paste")
@edit_options
def paste_cmd(checkpoint, spec_path, image, mask, out, reuse_trajectory, dx, dy,
              seed, t_skip, prompt_source, prompt_target, control_mode) -> None:
    """Run an object paste (EditSpec with drag.mode = "paste")."""
    overrides = {"drag.dx": dx, "drag.dy": dy, "seed": seed, "T_skip": t_skip,
                 "prompt_source": prompt_source, "prompt_target": prompt_target,
                 "control.mode": control_mode}
    _run_edit_command(checkpoint, spec_path, image, mask, out, reuse_trajectory,
                      overrides, require_paste=True)


@main.command("eval")
@checkpoint_option
@click.option("--manifest", required=True, type=click.Path(), help="Manifest JSON.")
@click.option("--out", required=True, type=click.Path(), help="Report directory.")
def eval_cmd(checkpoint, manifest, out) -> None:
    """Run the benchmark metrics over a manifest of drag cases."""
    if not Path(manifest).exists():
        raise SystemExit(f"manifest not found: {manifest}")
    backbone = _load_backbone(checkpoint)
    from .evalsuite import EvalManifest, run_benchmark
    m = EvalManifest.load(manifest)
    report = run_benchmark(backbone, m, out_dir=Path(out),
                           on_case=lambda line: click.echo(line))
    if not m.cases:
        click.echo("empty manifest: wrote empty report")
        return
    click.echo(json.dumps(report["aggregate"], indent=2, sort_keys=True))


@main.command("serve")
@checkpoint_option
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--sessions-dir", default=None,
              help="Session storage root (or env DRAGEDIT_SESSIONS).")
@click.option("--max-jobs", default=2, show_default=True,
              help="Maximum concurrently executing jobs.")
def serve_cmd(checkpoint, host, port, sessions_dir, max_jobs) -> None:
    """Start the HTTP editing service."""
    import uvicorn
    backbone = _load_backbone(checkpoint)
    from .server import create_app
    app = create_app(backbone, sessions_dir=sessions_dir, max_jobs=max_jobs)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
