"""Command-line entry points: generate, render, score, anchor synth, codebook."""

from __future__ import annotations

import json
import os
import subprocess
import sys

import click
import numpy as np
import yaml

from . import anchor as anchor_mod
from . import codebook as cb_mod
from . import engine as engine_mod
from .config import ConfigError, build_provider, load_config, save_config
from .guidance import GuidanceError, RemoteGuidance
from .images import write_ppm
from .render import camera_from_angles, render_composite, render_single, turntable_cameras

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PROVIDER = 3


class CliError(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _input_error(msg: str) -> CliError:
    return CliError(msg, EXIT_INPUT)


def _provider_error(msg: str) -> CliError:
    return CliError(msg, EXIT_PROVIDER)


@click.group()
def main():
    """Compositional score-distillation scene optimizer."""


def _load_anchor(path: str) -> anchor_mod.AnchorOccupancy:
    if not os.path.exists(path):
        raise _input_error(f"anchor file not found: {path}")
    try:
        return anchor_mod.load_anchor(path)
    except anchor_mod.AnchorError as exc:
        raise _input_error(str(exc))


def _select_anchor_via_codebook(config, provider, base_dir: str):
    """Retrieve top-k poses for the interaction prompt and map the pick to a file."""
    section = config.codebook
    path = os.path.join(base_dir, section.path)
    if not os.path.exists(path):
        raise _input_error(f"codebook file not found: {path}")
    book = cb_mod.load_codebook(path)
    try:
        query = provider.embed_text(config.prompts.interaction)
    except GuidanceError as exc:
        raise _provider_error(f"text embedding failed: {exc}")
    result = cb_mod.retrieve_topk(book, query, k=section.k)
    index = 0
    if section.selector:
        payload = json.dumps({"prompt": config.prompts.interaction,
                              "candidates": [{"pose_id": p, "similarity": s}
                                             for p, s in result.ranked]})
        proc = subprocess.run(section.selector, shell=True, input=payload,
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise _input_error(f"selector command failed: {proc.stderr.strip()}")
        index = int(proc.stdout.strip())
        if not 0 <= index < len(result.ranked):
            raise _input_error(f"selector returned out-of-range index {index}")
    pose_id = result.ranked[index][0]
    anchor_path = os.path.join(base_dir, section.anchor_dir, f"{pose_id}.ifan")
    return pose_id, anchor_path, result


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--resume", "resume_path", default=None, type=click.Path(),
              help="Continue from a checkpoint instead of a fresh state.")
@click.option("--iterations", default=None, type=int,
              help="Override the configured iteration count.")
def generate(config_path, resume_path, iterations):
    """Run the full optimization; writes checkpoints, metrics, and turntable frames."""
    if not os.path.exists(config_path):
        raise _input_error(f"config file not found: {config_path}")
    try:
        config = load_config(config_path)
    except (ConfigError, ValueError, yaml.YAMLError) as exc:
        raise _input_error(f"bad config: {exc}")
    base_dir = os.path.dirname(os.path.abspath(config_path))
    try:
        provider = build_provider(config, base_dir)
    except ConfigError as exc:
        raise _input_error(str(exc))

    anchor_path = config.anchor_path
    if not os.path.isabs(anchor_path):
        anchor_path = os.path.join(base_dir, anchor_path)
    retrieval_record = None
    if config.codebook is not None:
        pose_id, anchor_path, result = _select_anchor_via_codebook(config, provider,
                                                                   base_dir)
        retrieval_record = {"pose_id": pose_id,
                            "ranked": [[p, s] for p, s in result.ranked]}
        click.echo(f"retrieved anchor pose {pose_id!r}")
    anchor = _load_anchor(anchor_path)

    out_dir = config.output_dir
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.resolved.yaml"))
    if retrieval_record is not None:
        with open(os.path.join(out_dir, "retrieval.json"), "w") as fh:
            json.dump(retrieval_record, fh, indent=2)

    params = config.engine_params()
    if resume_path:
        if not os.path.exists(resume_path):
            raise _input_error(f"checkpoint not found: {resume_path}")
        state = engine_mod.load_checkpoint(resume_path, anchor)
    else:
        state = engine_mod.SceneState.fresh(anchor, config.prompts,
                                            config.grid_resolution, config.seed,
                                            params)
    schedule = config.schedule(state.field_h.voxel_size)
    total = iterations if iterations is not None else config.iterations
    remaining = max(0, total - state.iteration)
    try:
        engine_mod.run(state, provider, params, schedule, remaining,
                       metrics_path=os.path.join(out_dir, "metrics.jsonl"),
                       checkpoint_every=config.checkpoint_every,
                       checkpoint_dir=out_dir)
    except GuidanceError as exc:
        raise _provider_error(f"guidance provider failed: {exc}")
    engine_mod.save_checkpoint(state, os.path.join(out_dir, "final.ifck"))

    focus = engine_mod.trace_focus_union(state.field_h, state.field_o, params.ref_step)
    half = float(0.5 * (anchor.box_max - anchor.box_min).max())
    cams = turntable_cameras(focus, 1.6 * half, config.turntable_frames,
                             resolution=params.resolution, fov_y=params.fov_y)
    for i, cam in enumerate(cams):
        out = render_composite(state.field_h, state.field_o, cam,
                               samples_per_ray=params.samples_per_ray)
        write_ppm(os.path.join(out_dir, f"turntable_{i:03d}.ppm"),
                  out.rgb.detach().numpy())
    click.echo(f"done: iteration {state.iteration}, outputs in {out_dir}")


@main.command("render")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--azimuth", default=0.0, type=float)
@click.option("--elevation", default=15.0, type=float)
@click.option("--radius-scale", default=1.6, type=float, help="x scene half-extent")
@click.option("--resolution", default=64, type=int)
@click.option("--samples-per-ray", default=48, type=int)
@click.option("--out-dir", default=".", type=click.Path())
def render_cmd(ckpt_path, azimuth, elevation, radius_scale, resolution,
               samples_per_ray, out_dir):
    """Render human-only, object-only, and composite views from a checkpoint."""
    if not os.path.exists(ckpt_path):
        raise _input_error(f"checkpoint not found: {ckpt_path}")
    try:
        state = engine_mod.load_checkpoint(ckpt_path, None)
    except ValueError as exc:
        raise _input_error(f"bad checkpoint: {exc}")
    os.makedirs(out_dir, exist_ok=True)
    fld = state.field_h
    half = float(0.5 * (fld.box_max - fld.box_min).max())
    focus = engine_mod.trace_focus_union(state.field_h, state.field_o)
    cam = camera_from_angles(focus, radius_scale * half, elevation, azimuth,
                             resolution=(resolution, resolution))
    views = {
        "human": render_single(state.field_h, cam, samples_per_ray),
        "object": render_single(state.field_o, cam, samples_per_ray),
        "composite": render_composite(state.field_h, state.field_o, cam,
                                      samples_per_ray),
    }
    for name, out in views.items():
        path = os.path.join(out_dir, f"{name}.ppm")
        write_ppm(path, out.rgb.detach().numpy())
        click.echo(path)


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--prompt", required=True)
@click.option("--config", "config_path", default=None, type=click.Path(),
              help="Config supplying the provider (mock or remote).")
@click.option("--url", default=None, help="Remote guidance endpoint.")
@click.option("--views", default=8, type=int)
@click.option("--resolution", default=64, type=int)
def score(ckpt_path, prompt, config_path, url, views, resolution):
    """Mean cosine similarity between the prompt and turntable render embeddings."""
    if not os.path.exists(ckpt_path):
        raise _input_error(f"checkpoint not found: {ckpt_path}")
    state = engine_mod.load_checkpoint(ckpt_path, None)
    url = os.environ.get("IF_GUIDANCE_URL") or url
    if url:
        provider = RemoteGuidance(url)
    elif config_path:
        config = load_config(config_path)
        provider = build_provider(config, os.path.dirname(os.path.abspath(config_path)))
    else:
        raise _input_error("score needs --url, IF_GUIDANCE_URL, or --config")
    half = float(0.5 * (state.field_h.box_max - state.field_h.box_min).max())
    focus = engine_mod.trace_focus_union(state.field_h, state.field_o)
    cams = turntable_cameras(focus, 1.6 * half, views,
                             resolution=(resolution, resolution))
    try:
        value = score_views(state, provider, prompt, cams)
    except GuidanceError as exc:
        raise _provider_error(str(exc))
    click.echo(f"{value:.6f}")


def score_views(state, provider, prompt: str, cams) -> float:
    """Mean over views of cosine(prompt embedding, view embedding)."""
    text_vec = np.asarray(provider.embed_text(prompt), dtype=np.float64)
    text_vec = text_vec / np.linalg.norm(text_vec)
    sims = []
    for cam in cams:
        out = render_composite(state.field_h, state.field_o, cam)
        vec = np.asarray(provider.embed_image(out.rgb.detach().numpy()),
                         dtype=np.float64)
        vec = vec / np.linalg.norm(vec)
        sims.append(float(text_vec @ vec))
    return float(np.mean(sims))


@main.group("anchor")
def anchor_group():
    """Anchor occupancy utilities."""


@anchor_group.command("synth")
@click.option("--shape", type=click.Choice(["capsule-person", "sphere", "box"]),
              required=True)
@click.option("--resolution", default=32, type=int)
@click.option("--extent", default=1.0, type=float)
@click.option("--out", "out_path", required=True, type=click.Path())
def anchor_synth(shape, resolution, extent, out_path):
    """Generate a procedural occupancy fixture and write it as an anchor file."""
    anc = anchor_mod.synth_anchor(shape, resolution, extent)
    anchor_mod.save_anchor(anc, out_path)
    click.echo(f"{out_path}: {shape} {anc.resolution}, "
               f"{int(anc.grid.sum())} occupied voxels")


@main.group("codebook")
def codebook_group():
    """Pose-embedding codebook construction and queries."""


def _read_records(path: str) -> list[cb_mod.PoseRecord]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                pid = row["pose_id"]
                if "view_embeddings" in row:
                    emb = cb_mod.average_view_embeddings(row["view_embeddings"])
                    count = len(row["view_embeddings"])
                else:
                    emb = np.asarray(row["embedding"], dtype=np.float64)
                    count = int(row.get("view_count", 1))
                records.append(cb_mod.PoseRecord(pose_id=pid, embedding=emb,
                                                 view_count=count))
            except (KeyError, ValueError, cb_mod.CodebookError) as exc:
                raise _input_error(f"{path}:{line_no}: bad record: {exc}")
    if not records:
        raise _input_error(f"{path}: no records")
    return records


@codebook_group.command("build")
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--k", required=True, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--max-iters", default=100, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def codebook_build(input_path, k, seed, max_iters, out_path):
    """Cluster a JSONL records file ({pose_id, embedding|view_embeddings}) into a codebook."""
    if not os.path.exists(input_path):
        raise _input_error(f"records file not found: {input_path}")
    records = _read_records(input_path)
    try:
        book = cb_mod.build_codebook(records, K=k, seed=seed, max_iters=max_iters)
    except cb_mod.CodebookError as exc:
        raise _input_error(str(exc))
    cb_mod.save_codebook(book, out_path)
    click.echo(f"{out_path}: K={book.K} D={book.D} from {len(records)} records")


@codebook_group.command("query")
@click.option("--codebook", "codebook_path", required=True, type=click.Path())
@click.option("--text", required=True)
@click.option("--k", default=cb_mod.DEFAULT_TOP_K, type=int)
@click.option("--endpoint", default=None, help="Guidance service for text embedding.")
@click.option("--embedding-file", default=None, type=click.Path(),
              help="Stub embedding (.json list or .npy) instead of a service.")
def codebook_query(codebook_path, text, k, endpoint, embedding_file):
    """Retrieve the top-k anchor poses for a text prompt."""
    if not os.path.exists(codebook_path):
        raise _input_error(f"codebook file not found: {codebook_path}")
    book = cb_mod.load_codebook(codebook_path)
    endpoint = os.environ.get("IF_GUIDANCE_URL") or endpoint
    if embedding_file:
        if embedding_file.endswith(".npy"):
            query = np.load(embedding_file)
        else:
            with open(embedding_file) as fh:
                query = np.asarray(json.load(fh), dtype=np.float64)
    elif endpoint:
        try:
            query = RemoteGuidance(endpoint).embed_text(text)
        except GuidanceError as exc:
            raise _provider_error(f"embedding request failed: {exc}")
    else:
        raise _input_error("query needs --embedding-file, --endpoint, or IF_GUIDANCE_URL")
    try:
        result = cb_mod.retrieve_topk(book, query, k=k)
    except cb_mod.CodebookError as exc:
        raise _input_error(str(exc))
    click.echo(json.dumps({"ranked": [[p, s] for p, s in result.ranked]}))


if __name__ == "__main__":
    main()
