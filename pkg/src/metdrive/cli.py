"""Command-line entry point: data generation, training, open- and closed-loop
evaluation, ablation sweeps, plotting, and the self-test oracle suite.
"""

from __future__ import annotations

import argparse
import glob
import logging
import math
import os
import sys

import numpy as np
import torch

from . import losses, metrics, plots, synthworld, training
from .domain import (
    ConfigurationError,
    EpisodeLog,
    ValidationError,
    read_records,
    write_records,
)
from .ego_temporal import positional_embedding
from .model import build_model, load_checkpoint
from .synthworld import WorldConfig, generate_scenario, load_dataset, make_dataset
from .training import ExperimentConfig, apply_overrides, parse_config_file

log = logging.getLogger("metdrive")

ABLATION_VARIANTS = {
    "full": {},
    "no_tg_loss": {"loss.temporal_loss_on": "false"},
    "paired_undecomposed": {"model.input_mode": "paired_undecomposed"},
    "raw_theta_u_psi": {"model.input_mode": "raw_theta_u_psi"},
}


def setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}.get(
        os.environ.get("METDRIVE_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metdrive",
        description="synthetic-world driving stack: data, training, evaluation, ablations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "generate the expert dataset"),
        ("train", "train a model on the dataset"),
        ("eval-openloop", "trajectory metrics of a checkpoint on a dataset"),
        ("eval-closedloop", "closed-loop route scores of a checkpoint"),
        ("ablate", "train and evaluate the ablation variants"),
        ("plot", "render loss curves and speed traces to image files"),
        ("selftest", "run the gradient and oracle self checks"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a configuration key (repeatable)")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigurationError("--config is required for this command")
    if not os.path.isfile(args.config):
        raise ConfigurationError(f"config file not found: {args.config}")
    flat = parse_config_file(args.config)
    flat = apply_overrides(flat, args.overrides)
    if args.seed is not None:
        flat["train.seed"] = str(args.seed)
    return ExperimentConfig.from_flat(flat)


def _resolve(out_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(out_dir, path)


def _data_params(cfg: ExperimentConfig) -> dict:
    g = cfg.extra.get
    return {
        "routes": int(g("data.routes", 40)),
        "difficulty_mix": str(g("data.difficulty_mix", "0,1,1,2")),
        "stride": int(g("data.stride", 4)),
        "smooth_window": int(g("data.smooth_window", 5)),
        "seed": int(g("data.seed", cfg.seed)),
    }


def _eval_params(cfg: ExperimentConfig) -> dict:
    g = cfg.extra.get
    return {
        "routes": int(g("eval.routes", 20)),
        "difficulty_mix": str(g("eval.difficulty_mix", "0,1,1,2")),
        "seed": int(g("eval.seed", 10_000 + cfg.seed)),
        "deadband": float(g("eval.deadband", 0.1)),
        "replan": int(g("eval.replan", 2)),
        "dataset_dir": str(g("eval.dataset_dir", "")),
    }


def build_scenarios(cfg: ExperimentConfig, n_routes: int, seed: int, difficulty_mix: str):
    base = WorldConfig.from_config(cfg.to_flat())
    mix = synthworld.parse_difficulty_mix(difficulty_mix)
    return [generate_scenario([seed, i], mix[i % len(mix)], base) for i in range(n_routes)]


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    params = _data_params(cfg)
    if args.seed is not None:
        params["seed"] = args.seed
    out = _resolve(args.out, cfg.dataset_dir)
    world = WorldConfig.from_config(cfg.to_flat())
    meta = make_dataset(
        params["routes"], params["seed"], world, out,
        window_len=cfg.window_len, waypoints=cfg.waypoints, stride=params["stride"],
        difficulty_mix=params["difficulty_mix"], smooth_window=params["smooth_window"],
        config_snapshot=cfg.to_flat())
    log.info("dataset: %d samples over %d routes -> %s", meta["samples"], params["routes"], out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    samples, _ = load_dataset(_resolve(args.out, cfg.dataset_dir))
    result = training.train(cfg, samples=samples, out_dir=args.out)
    log.info("trained %d epochs; final loss %.6f; checkpoint %s",
             cfg.epochs, result.curve[-1]["loss"], result.checkpoint_path)
    return 0


def cmd_eval_openloop(args) -> int:
    cfg = load_config(args)
    eval_p = _eval_params(cfg)
    dataset_dir = eval_p["dataset_dir"] or cfg.dataset_dir
    samples, _ = load_dataset(_resolve(args.out, dataset_dir))
    model, _, _, _ = load_checkpoint(_resolve(args.out, cfg.checkpoint))
    report = metrics.open_loop_eval(model, samples)
    write_records(os.path.join(args.out, "openloop.jsonl"), [report])
    log.info("open loop: ADE %.4f m, FDE %.4f m over %d samples",
             report["ADE"], report["FDE"], report["samples"])
    return 0


def _write_episodes(rows_dir: str, logs: list[EpisodeLog]) -> None:
    os.makedirs(rows_dir, exist_ok=True)
    for i, episode in enumerate(logs):
        write_records(os.path.join(rows_dir, f"route_{i:03d}.jsonl"), episode.to_records())


def _closed_loop(cfg: ExperimentConfig, checkpoint_path: str, out_dir: str,
                 seed_override: int | None, keep_episodes: bool = True):
    eval_p = _eval_params(cfg)
    seed = eval_p["seed"] if seed_override is None else seed_override
    scenarios = build_scenarios(cfg, eval_p["routes"], seed, eval_p["difficulty_mix"])
    model, _, _, _ = load_checkpoint(checkpoint_path)
    model.eval()
    penalties = metrics.PenaltyTable.from_config(cfg.to_flat())
    episodes = []
    rows = []
    for i, (route, world) in enumerate(scenarios):
        policy = metrics.ModelPolicy(model, route, world,
                                     replan_every=eval_p["replan"])
        episode = synthworld.run_episode(policy, route, world)
        rc = metrics.route_completion(episode)
        isc = metrics.infraction_score(episode, penalties)
        smooth = metrics.smoothness(episode, eval_p["deadband"])
        rows.append({"v": 1, "kind": "route_result", "route": i, "DS": rc * isc,
                     "RC": rc, "IS": isc, "complete": episode.complete,
                     "infractions": len(episode.all_infractions()),
                     "speed_min_kmh": smooth.speed_min_kmh,
                     "speed_max_kmh": smooth.speed_max_kmh,
                     "jerk_rms": smooth.jerk_rms,
                     "oscillations": smooth.oscillation_count})
        episodes.append(episode)
    agg = metrics.aggregate_rows(rows)
    write_records(os.path.join(out_dir, "closedloop.jsonl"), rows + [agg])
    with open(os.path.join(out_dir, "closedloop.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("route,DS,RC,IS,oscillations\n")
        for r in rows:
            fh.write(f"{r['route']},{r['DS']:.3f},{r['RC']:.3f},{r['IS']:.4f},{r['oscillations']}\n")
    if keep_episodes:
        _write_episodes(os.path.join(out_dir, "episodes"), episodes)
    return rows, agg


def cmd_eval_closedloop(args) -> int:
    cfg = load_config(args)
    rows, agg = _closed_loop(cfg, _resolve(args.out, cfg.checkpoint), args.out, args.seed)
    log.info("closed loop over %d routes: DS %.2f RC %.2f IS %.3f",
             agg["routes"], agg["DS"], agg["RC"], agg["IS"])
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    dataset_dir = _resolve(args.out, cfg.dataset_dir)
    if not os.path.isfile(os.path.join(dataset_dir, synthworld.DATASET_META_FILE)):
        log.info("dataset missing, generating it first")
        cmd_gen_data(args)
    samples, _ = load_dataset(dataset_dir)
    comparison = []
    for name, overrides in ABLATION_VARIANTS.items():
        flat = apply_overrides(cfg.to_flat(), [f"{k}={v}" for k, v in overrides.items()])
        variant_cfg = ExperimentConfig.from_flat(flat)
        if args.seed is not None:
            variant_cfg = ExperimentConfig.from_flat(
                apply_overrides(variant_cfg.to_flat(), [f"train.seed={args.seed}"]))
        variant_dir = os.path.join(args.out, f"ablate_{name}")
        log.info("variant %s: training", name)
        result = training.train(variant_cfg, samples=samples, out_dir=variant_dir)
        rows, agg = _closed_loop(variant_cfg, result.checkpoint_path, variant_dir,
                                 args.seed, keep_episodes=False)
        report = metrics.open_loop_eval(result.model, samples)
        comparison.append({"v": 1, "kind": "ablation", "variant": name,
                           "DS": agg["DS"], "RC": agg["RC"], "IS": agg["IS"],
                           "ADE": report["ADE"]})
        log.info("variant %s: DS %.2f RC %.2f IS %.3f ADE %.3f",
                 name, agg["DS"], agg["RC"], agg["IS"], report["ADE"])
    write_records(os.path.join(args.out, "comparison.jsonl"), comparison)
    with open(os.path.join(args.out, "comparison.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant,DS,RC,IS,ADE\n")
        for row in comparison:
            fh.write(f"{row['variant']},{row['DS']:.3f},{row['RC']:.3f},"
                     f"{row['IS']:.4f},{row['ADE']:.4f}\n")
    width = max(len(r["variant"]) for r in comparison)
    print(f"{'variant':<{width}}  {'DS':>7}  {'RC':>7}  {'IS':>6}  {'ADE':>7}")
    for row in comparison:
        print(f"{row['variant']:<{width}}  {row['DS']:>7.2f}  {row['RC']:>7.2f}  "
              f"{row['IS']:>6.3f}  {row['ADE']:>7.4f}")
    return 0


def cmd_plot(args) -> int:
    cfg = load_config(args)
    fig_dir = os.path.join(args.out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    rendered = []
    curve_path = os.path.join(args.out, training.LOSS_CURVE_FILE)
    if os.path.isfile(curve_path):
        rendered.append(plots.plot_loss_curve(
            read_records(curve_path), os.path.join(fig_dir, "loss_curve.png")))
    for ep_path in sorted(glob.glob(os.path.join(args.out, "episodes", "route_*.jsonl"))):
        episode = EpisodeLog.from_records(read_records(ep_path))
        stem = os.path.splitext(os.path.basename(ep_path))[0]
        rendered.append(plots.plot_speed_trace(
            episode, os.path.join(fig_dir, f"speed_{stem}.png"), title=stem))
        rendered.append(plots.plot_route_overview(
            episode, os.path.join(fig_dir, f"path_{stem}.png"), title=stem))
    if not rendered:
        raise ValidationError(f"nothing to plot under {args.out} "
                              "(expected loss_curve.jsonl or episodes/route_*.jsonl)")
    for p in rendered:
        log.info("wrote %s", p)
    return 0


def cmd_selftest(args) -> int:
    """Quick oracle suite: exits 0 iff every check passes."""
    failures = []

    def check(name: str, ok: bool, detail: str = ""):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
        if not ok:
            failures.append(name)

    # quadratic gradcheck sanity
    p = torch.tensor([1.0, 2.0], dtype=torch.float64)
    err = losses.gradcheck(lambda q: (q ** 2).sum(), [p])
    check("gradcheck quadratic", err < 1e-9, f"max rel err {err:.2e}")

    # positional embedding against scalar formula
    pe = positional_embedding(64, 32).numpy()
    worst = 0.0
    for pos in range(64):
        for i in range(0, 32, 2):
            angle = pos / (10000.0 ** (i / 32.0))
            worst = max(worst, abs(pe[pos, i] - math.sin(angle)),
                        abs(pe[pos, i + 1] - math.cos(angle)))
    check("positional embedding exact", worst < 1e-12, f"max abs err {worst:.2e}")

    # consistency-loss semantics
    rng = np.random.default_rng(0)
    full = torch.tensor(rng.normal(size=(8, 2)))
    first = full.clone()
    second = full.clone()
    first[4:] = 99.0
    second[:4] = -99.0
    w = losses.LossWeights(alpha=0.7, beta=0.3, lambda_tg=1.0)
    zero = float(losses.temporal_guidance_loss(first, second, full, w))
    check("consistency loss zero on matching halves", zero == 0.0, f"value {zero}")

    # full-model gradient integrity on a tiny instance
    torch.manual_seed(0)
    tiny = build_model({
        "model.window_len": 4, "model.waypoints": 4, "model.embed_dim": 8,
        "model.temporal_dim": 8, "model.geometric_dim": 8, "model.gru_hidden": 8,
        "model.heads": 2, "model.desc_dim": 8, "model.base_channels": 2,
        "model.camera_h": 8, "model.camera_w": 8, "model.bev_h": 8, "model.bev_w": 8,
    })
    cam = torch.tensor(rng.uniform(size=(1, 4, 8, 8)))
    bev = torch.tensor(rng.uniform(size=(1, 4, 8, 8)))
    sx = torch.tensor(rng.normal(size=(1, 3, 4)))
    sy = torch.tensor(rng.normal(size=(1, 3, 4)))
    target = torch.tensor(rng.normal(size=(1, 2)))
    gt = torch.tensor(rng.normal(size=(1, 4, 2)))

    def model_loss(*params):
        pf, p1, p2 = tiny(cam, bev, sx, sy, target, with_halves=True)
        return losses.total_loss(pf[0], p1[0], p2[0], gt[0], w)

    err = losses.gradcheck(model_loss, list(tiny.parameters()), eps=1e-6)
    check("gradcheck full model", err < 1e-4, f"max rel err {err:.2e}")

    # metric oracles
    from .domain import InfractionEvent, LogStep, RouteSpec

    route = RouteSpec.from_targets([[0.0, 0.0], [10.0, 0.0]], [5.0])
    steps = (LogStep(t=0.0, x=0.0, y=0.0, theta=0.0, speed=1.0, steer=0.0, throttle=0.5,
                     infractions=(InfractionEvent("collision"),)),
             LogStep(t=0.1, x=1.0, y=0.0, theta=0.0, speed=1.0, steer=0.0, throttle=0.5,
                     infractions=(InfractionEvent("red_signal"),)))
    episode = EpisodeLog(steps=steps, route=route, completed_length=1.0)
    isc = metrics.infraction_score(episode, metrics.PenaltyTable(
        penalties={"collision": 0.7, "red_signal": 0.8}))
    check("infraction product", abs(isc - 0.56) < 1e-12, f"IS {isc}")
    ds = metrics.driving_score([(100.0, 1.0), (50.0, 0.8)])
    check("driving score mean", ds == 70.0, f"DS {ds}")

    print(f"{len(failures)} failure(s)" if failures else "all checks passed")
    return 1 if failures else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-openloop": cmd_eval_openloop,
    "eval-closedloop": cmd_eval_closedloop,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error in stage '{args.command}': {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error in stage '{args.command}': {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
