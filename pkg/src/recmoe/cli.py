"""Command-line entry points.

Subcommands: train, sample, gradcheck, analyze, frozenlake-gen,
frozenlake-train, frozenlake-eval. Every command is idempotent for a fixed
config and seed: re-running overwrites outputs with identical bytes. The
RECMOE_OUT environment variable overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, diffusion, frozenlake, gradcheck
from .checkpoint import IntegrityError, load_checkpoint, restore_parameters, save_checkpoint
from .config import (
    RunConfig,
    config_as_dict,
    config_from_dict,
    load_config,
    serialize_config,
)
from .images import write_pgm
from .recursion import RecursionConfig
from .rng import Rng
from .tensor import ConfigError


def _out_dir(run: RunConfig, override: str | None = None) -> Path:
    path = override or os.environ.get("RECMOE_OUT") or run.out_dir
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_recursion_config(run: RunConfig) -> RecursionConfig | None:
    layers = run.target_layer_list()
    if not layers:
        return None
    return RecursionConfig(
        experts=run.experts,
        latent_steps=run.latent_steps,
        tau=run.tau,
        target_layers=layers,
        remodulate_per_step=run.remodulate_per_step,
        gate_conditioning=run.gate_conditioning,
        balance_weight=run.balance_weight,
    )


def build_dit_model(run: RunConfig) -> diffusion.DitModel:
    cfg = diffusion.DitModelConfig(
        image_hw=run.image_size,
        channels=run.channels,
        patch=run.patch,
        dim=run.model_dim,
        heads=run.model_heads,
        layers=run.model_layers,
        classes=run.classes,
        recursion=build_recursion_config(run),
        lora_rank=run.lora_rank,
    )
    return diffusion.DitModel(cfg, Rng(run.seed))


def build_planner(run: RunConfig) -> tuple[frozenlake.FrozenLakePlanner, frozenlake.FrameDecoder]:
    cfg = frozenlake.PlannerConfig(
        grid=run.lake_grid,
        cell_px=run.lake_cell_px,
        patch=run.patch,
        dim=run.model_dim,
        heads=run.model_heads,
        rank=run.lora_rank,
        tau=run.tau,
    )
    root = Rng(run.seed)
    return (
        frozenlake.FrozenLakePlanner(cfg, root.spawn(1)),
        frozenlake.FrameDecoder(cfg, root.spawn(2)),
    )


def _write_log(path: Path, logs: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for entry in logs:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def cmd_train(config_path: str, out_override: str | None = None) -> int:
    run = load_config(config_path)
    out = _out_dir(run, out_override)
    (out / "config.txt").write_text(serialize_config(run), encoding="utf-8")
    if run.task == "frozenlake":
        return _train_frozenlake(run, out)
    return _train_diffusion(run, out)


def _train_diffusion(run: RunConfig, out: Path) -> int:
    dataset = diffusion.make_dataset(
        run.data_kind, run.data_count, run.classes, run.image_size, run.image_size, run.seed
    )
    schedule = diffusion.linear_schedule(run.diffusion_steps)
    model = build_dit_model(run)
    tcfg = diffusion.TrainConfig(
        steps=run.steps,
        batch_size=run.batch_size,
        lr=run.lr,
        betas=(run.beta1, run.beta2),
        weight_decay=run.weight_decay,
        seed=run.seed,
        log_every=run.log_every,
        balance_weight=run.balance_weight,
        force_balance=run.force_balance,
    )
    cfg_dict = config_as_dict(run)

    def checkpoint_cb(step: int, m: diffusion.DitModel) -> None:
        save_checkpoint(out / f"checkpoint_step{step}.rmoe", m.parameters(), cfg_dict)

    logs = diffusion.train(
        model, dataset, schedule, tcfg,
        checkpoint_cb=checkpoint_cb if run.checkpoint_every else None,
        checkpoint_every=run.checkpoint_every,
    )
    _write_log(out / "train_log.jsonl", logs)
    save_checkpoint(out / "checkpoint.rmoe", model.parameters(), cfg_dict)
    print(f"trained {run.steps} steps; final loss {logs[-1]['loss']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.rmoe'}")
    return 0


def _train_frozenlake(run: RunConfig, out: Path) -> int:
    maps = frozenlake.generate_maps(run.lake_grid, run.lake_maps, run.hole_density, run.seed)
    rollouts = frozenlake.make_rollouts(
        maps, run.rollouts_per_map, run.detour_eps, run.seed + 1, run.lake_cell_px
    )
    planner, decoder = build_planner(run)
    tcfg = frozenlake.PlannerTrainConfig(
        steps=run.lake_steps,
        lr=run.lake_lr,
        betas=(run.beta1, run.beta2),
        weight_decay=run.weight_decay,
        seed=run.seed,
        log_every=run.log_every,
    )
    logs = frozenlake.train_planner(rollouts, planner, decoder, tcfg)
    _write_log(out / "train_log.jsonl", logs)
    params = {
        **planner.parameters(),
        **{f"decoder.{k}": v for k, v in decoder.parameters().items()},
    }
    save_checkpoint(out / "checkpoint.rmoe", params, config_as_dict(run))
    print(f"trained planner on {len(rollouts)} rollouts; final loss {logs[-1]['loss']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.rmoe'}")
    return 0


def _load_model(ckpt_path: str):
    cfg_dict, tensors = load_checkpoint(ckpt_path)
    run = config_from_dict(cfg_dict)
    if run.task == "frozenlake":
        planner, decoder = build_planner(run)
        params = {
            **planner.parameters(),
            **{f"decoder.{k}": v for k, v in decoder.parameters().items()},
        }
        restore_parameters(params, tensors)
        return run, (planner, decoder)
    model = build_dit_model(run)
    restore_parameters(model.parameters(), tensors)
    return run, model


def cmd_sample(
    ckpt: str,
    class_id: int,
    n: int,
    seed: int,
    t_latent_override: int | None,
    out_override: str | None = None,
) -> int:
    run, model = _load_model(ckpt)
    if run.task != "diffusion":
        raise ConfigError("sample needs a diffusion checkpoint")
    out = _out_dir(run, out_override)
    schedule = diffusion.linear_schedule(run.diffusion_steps)
    images = diffusion.sample(model, schedule, class_id, n, seed, t_latent_override)
    files = []
    for i in range(n):
        name = f"sample_{class_id}_{i:03d}.pgm"
        write_pgm(out / name, images[i])
        files.append(name)
    manifest = {
        "class": class_id,
        "n": n,
        "seed": seed,
        "t_latent_override": t_latent_override,
        "files": files,
    }
    (out / "samples.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"wrote {n} samples to {out}")
    return 0


def cmd_gradcheck(seed: int, corrupt: str | None = None) -> int:
    results = gradcheck.run_suite(seed=seed, corrupt=corrupt)
    print(gradcheck.format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_analyze(
    ckpt: str, mode: str, out_override: str | None = None, n: int | None = None, seed: int = 0
) -> int:
    run, model = _load_model(ckpt)
    if run.task != "diffusion":
        raise ConfigError("analyze needs a diffusion checkpoint")
    if not run.target_layer_list():
        raise ConfigError("checkpoint has no recursive layers to trace")
    out = _out_dir(run, out_override)
    schedule = diffusion.linear_schedule(run.diffusion_steps)
    traces: list = []
    count = n if n is not None else (1 if mode == "trajectories" else 4)
    diffusion.sample(model, schedule, 0, count, seed, traces=traces)
    if mode == "trajectories":
        path = out / "trajectories.csv"
        records = analysis.export_trajectories(traces, path)
        print(f"wrote {len(records)} trajectory rows to {path}")
    elif mode == "routing":
        path = out / "routing_stats.json"
        stats = analysis.export_routing_stats(traces, 10, path)
        print(f"wrote {len(stats)} routing-stat entries to {path}")
    else:
        raise ConfigError(f"unknown analyze mode {mode!r}")
    return 0


def cmd_frozenlake_gen(config_path: str, out_override: str | None = None) -> int:
    run = load_config(config_path)
    out = _out_dir(run, out_override) / "maps"
    out.mkdir(parents=True, exist_ok=True)
    maps = frozenlake.generate_maps(run.lake_grid, run.lake_maps, run.hole_density, run.seed)
    for i, lake in enumerate(maps):
        (out / f"map_{i:04d}.txt").write_text(lake.to_text(), encoding="utf-8")
    print(f"wrote {len(maps)} maps to {out}")
    return 0


def cmd_frozenlake_eval(ckpt: str, out_override: str | None = None) -> int:
    run, bundle = _load_model(ckpt)
    if run.task != "frozenlake":
        raise ConfigError("frozenlake-eval needs a frozenlake checkpoint")
    planner, decoder = bundle
    out = _out_dir(run, out_override)
    heldout = frozenlake.generate_maps(
        run.lake_grid, run.heldout_maps, run.hole_density, run.seed + 7777
    )
    acc = frozenlake.gate_accuracy(heldout, planner)
    report = frozenlake.evaluate_planner(heldout, planner, decoder)
    report["gate_accuracy"] = acc
    (out / "eval.json").write_text(
        json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
    )
    failures = [i for i, o in enumerate(report["outcomes"]) if o != "goal"]
    for rank, idx in enumerate(failures[:3]):
        result = frozenlake.plan_and_decode(heldout[idx], planner, decoder)
        frozenlake.save_plan(result, out / f"failure_{rank}")
    print(
        f"gate accuracy {acc:.3f}, goal rate {report['goal_rate']:.3f} "
        f"over {report['maps']} held-out maps"
    )
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recmoe", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the diffusion or frozenlake task from a config")
    t.add_argument("config")
    t.add_argument("--out", default=None, help="override the output directory")

    s = sub.add_parser("sample", help="draw conditional samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--class-id", type=int, default=0)
    s.add_argument("-n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--t-latent-override", type=int, default=None)
    s.add_argument("--out", default=None)

    g = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    a = sub.add_parser("analyze", help="export latent trajectories or routing statistics")
    a.add_argument("checkpoint")
    a.add_argument("--mode", choices=("trajectories", "routing"), default="trajectories")
    a.add_argument("--out", default=None)
    a.add_argument("-n", type=int, default=None)
    a.add_argument("--seed", type=int, default=0)

    fg = sub.add_parser("frozenlake-gen", help="generate solvable lake maps")
    fg.add_argument("config")
    fg.add_argument("--out", default=None)

    ft = sub.add_parser("frozenlake-train", help="train the lake planner (task override)")
    ft.add_argument("config")
    ft.add_argument("--out", default=None)

    fe = sub.add_parser("frozenlake-eval", help="evaluate a trained planner on held-out maps")
    fe.add_argument("checkpoint")
    fe.add_argument("--out", default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out)
        if args.command == "sample":
            return cmd_sample(
                args.checkpoint, args.class_id, args.n, args.seed,
                args.t_latent_override, args.out,
            )
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.corrupt)
        if args.command == "analyze":
            return cmd_analyze(args.checkpoint, args.mode, args.out, args.n, args.seed)
        if args.command == "frozenlake-gen":
            return cmd_frozenlake_gen(args.config, args.out)
        if args.command == "frozenlake-train":
            run = load_config(args.config)
            if run.task != "frozenlake":
                print("frozenlake-train: config task must be 'frozenlake'", file=sys.stderr)
                return 2
            return cmd_train(args.config, args.out)
        if args.command == "frozenlake-eval":
            return cmd_frozenlake_eval(args.checkpoint, args.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except diffusion.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
