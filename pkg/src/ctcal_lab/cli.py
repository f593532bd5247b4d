"""Command-line entry point tying generation, training, and evaluation
into reproducible experiments.

Exit codes: 0 ok, 2 config error, 3 runtime error, 4 assertion failure
(for ``ablate --assert``).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import evaluation, models, prompts, scenes, schedules, training
from .errors import ConfigError, CtcalError, UntrainedModel
from .training import TrainConfig, config_from_flat, config_to_flat

LARGE_T_FRACTIONS = (0.7, 0.8, 0.9)


def _echo_config(out_dir: Path, payload: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=1, default=str))


def _load_train_config(config_path: str | None, overrides: list[str]) -> TrainConfig:
    flat = {}
    if config_path:
        flat = json.loads(Path(config_path).read_text())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE: {item!r}")
        key, raw = item.split("=", 1)
        try:
            flat[key] = json.loads(raw)
        except json.JSONDecodeError:
            flat[key] = raw
    return config_from_flat(flat)


def cmd_dataset_gen(args) -> int:
    out = Path(args.out)
    _echo_config(out, vars(args))
    samples = scenes.generate_dataset(args.seed, args.count,
                                      num_subjects=args.subjects,
                                      relation_mode=args.relations)
    scenes.write_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_train_config(args.config, args.set)
    out = Path(args.out)
    _echo_config(out, config_to_flat(config))
    ckpt = training.run_training(config, args.data, out, resume=args.resume,
                                 init_from=args.init_from)
    print(f"final checkpoint: {ckpt}")
    return 0


def _curve_at_large_t(model, dataset, config: TrainConfig,
                      sample_cap: int = 64) -> float:
    schedule = schedules.NoiseSchedule(config.schedule_kind, config.T_train)
    ts = sorted(int(f * config.T_train) for f in LARGE_T_FRACTIONS)
    curve = evaluation.iou_vs_timestep(model, dataset[:sample_cap], ts, [0, 1],
                                       schedule)
    return float(np.mean(curve.mean_iou))


def cmd_eval(args) -> int:
    out = Path(args.out)
    _echo_config(out, vars(args))
    model = evaluation.load_trained_model(args.ckpt)
    _, config = training.load_model_from_checkpoint(args.ckpt)
    schedule = schedules.NoiseSchedule(config.schedule_kind, config.T_train)
    dataset = scenes.load_dataset(args.data)

    binding = evaluation.binding_accuracy(model, dataset, schedule,
                                          steps=args.steps,
                                          guidance_scale=args.guidance,
                                          max_prompts=args.max_prompts)
    curve = None
    if args.curve_timesteps:
        ts = [int(t) for t in args.curve_timesteps.split(",")]
        curve = evaluation.iou_vs_timestep(
            model, dataset[:args.max_prompts or len(dataset)], ts,
            list(range(args.seeds)), schedule)

    div_images = []
    for s in range(args.seeds):
        rng = torch.Generator().manual_seed(1000 + s)
        div_images.append(evaluation.generate(
            model, dataset[0].prompt, steps=args.steps,
            guidance_scale=args.guidance, rng=rng, schedule=schedule).numpy())
    diversity = evaluation.diversity_score(div_images) if len(div_images) >= 2 else None

    report = evaluation.EvalReport(
        run_id=f"eval-{int(time.time())}", binding=binding, iou_curve=curve,
        diversity=diversity, config=config_to_flat(config))
    evaluation.write_report(report, out / "report.json")
    print(json.dumps({"binding": binding, "diversity": diversity}, indent=1))
    return 0


def cmd_inspect_attn(args) -> int:
    out = Path(args.out)
    _echo_config(out, vars(args))
    model = evaluation.load_trained_model(args.ckpt)
    _, config = training.load_model_from_checkpoint(args.ckpt)
    schedule = schedules.NoiseSchedule(config.schedule_kind, config.T_train)
    tokens = prompts.tokenize(args.prompt)
    ids = torch.tensor(prompts.token_ids(tokens))

    rng = torch.Generator().manual_seed(args.seed)
    image = evaluation.generate(model, prompts.token_ids(tokens), steps=args.steps,
                                guidance_scale=args.guidance, rng=rng,
                                schedule=schedule)
    eps = torch.randn(image.shape, generator=rng)
    x_t = schedules.add_noise(image, eps, args.t, schedule)
    with torch.no_grad():
        _, records = model(x_t, ids, args.t)
    amap = models.aggregate_attention(records, model.cfg)
    evaluation.save_image_png(image.numpy(), out / "generated.png")
    paths = evaluation.render_heatmaps(amap, tokens, out)
    print(f"wrote {len(paths)} heatmaps to {out}")
    return 0


def cmd_repro_fig2b(args) -> int:
    out = Path(args.out)
    _echo_config(out, vars(args))
    model = evaluation.load_trained_model(args.ckpt)
    _, config = training.load_model_from_checkpoint(args.ckpt)
    schedule = schedules.NoiseSchedule(config.schedule_kind, config.T_train)
    dataset = scenes.load_dataset(args.data)[:args.max_prompts]
    ts = [int(round(f * config.T_train)) for f in np.arange(0.05, 0.96, 0.05)]
    curve = evaluation.iou_vs_timestep(model, dataset, ts,
                                       list(range(args.seeds)), schedule)
    rho = evaluation.iou_trend(curve)
    result = {
        "curve": asdict(curve),
        "spearman_rho": rho,
        "trend": "declining" if rho <= -0.5 else ("rising" if rho >= 0.5 else "no trend"),
        "argmax_timestep": int(curve.timesteps[int(np.argmax(curve.mean_iou))]),
    }
    (out / "curve.json").write_text(json.dumps(result, indent=1))
    evaluation.render_curve_png(curve.timesteps, curve.mean_iou, out / "curve.png")
    print(json.dumps({k: result[k] for k in ("spearman_rho", "trend")}, indent=1))
    return 0


def _validate_plan(plan: dict) -> list[tuple[str, TrainConfig]]:
    names = [r["name"] for r in plan["runs"]]
    if len(set(names)) != len(names):
        raise ConfigError("run names must be unique")
    runs = []
    for r in plan["runs"]:
        runs.append((r["name"], config_from_flat(dict(r.get("config", {})))))
    return runs


def cmd_ablate(args) -> int:
    plan = json.loads(Path(args.plan).read_text())
    out_root = Path(plan.get("output_root", args.out or "ablation_out"))
    runs = _validate_plan(plan)  # every config validates before any run starts
    seeds = plan.get("seeds", [0])
    dataset_dir = plan["dataset"]
    _echo_config(out_root, plan)
    dataset = scenes.load_dataset(dataset_dir)

    results = {}
    status = {}
    for name, base_config in runs:
        per_seed = []
        for seed in seeds:
            run_dir = out_root / name / f"seed{seed}"
            flat = config_to_flat(base_config)
            flat["seed"] = seed
            config = config_from_flat(flat)
            try:
                ckpt = training.run_training(config, dataset_dir, run_dir)
                model, _ = training.load_model_from_checkpoint(ckpt)
                model.eval()
                schedule = schedules.NoiseSchedule(config.schedule_kind, config.T_train)
                binding = evaluation.binding_accuracy(
                    model, dataset, schedule, max_prompts=plan.get("eval_prompts", 100))
                iou_hi = _curve_at_large_t(model, dataset, config)
                per_seed.append({"seed": seed, **binding, "iou_large_t": iou_hi})
                status[f"{name}/seed{seed}"] = "ok"
            except CtcalError as e:
                status[f"{name}/seed{seed}"] = f"failed: {e}"
        if per_seed:
            results[name] = {
                "per_seed": per_seed,
                "mean": {k: float(np.mean([r[k] for r in per_seed]))
                         for k in per_seed[0] if k != "seed"},
            }

    baseline_name = plan.get("baseline", "baseline")
    base = results.get(baseline_name, {}).get("mean")
    table_lines = [f"{'run':<14}{'color_bind':>11}{'two_obj':>9}{'iou@hi_t':>10}{'d_color':>9}"]
    for name, res in results.items():
        m = res["mean"]
        delta = (m["color_binding"] - base["color_binding"]) if base else float("nan")
        table_lines.append(f"{name:<14}{m['color_binding']:>11.3f}{m['two_object']:>9.3f}"
                           f"{m['iou_large_t']:>10.3f}{delta:>+9.3f}")
    table = "\n".join(table_lines)
    print(table)
    (out_root / "comparison.txt").write_text(table + "\n")
    (out_root / "comparison.json").write_text(json.dumps(
        {"results": results, "status": status}, indent=1))

    if args.assert_thresholds:
        failed = []
        for a in plan.get("assertions", []):
            run_val = results[a["run"]]["mean"][a["metric"]]
            base_val = results[a["baseline"]]["mean"][a["metric"]]
            if run_val - base_val < a.get("min_delta", 0.0):
                failed.append(a)
        if failed:
            print(f"assertions failed: {json.dumps(failed)}", file=sys.stderr)
            return 4
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctcal-lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("dataset-gen", help="generate a synthetic scene dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=2, choices=(1, 2))
    g.add_argument("--relations", default="none", choices=("none", "spatial"))
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train", help="run a training job")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--init-from", dest="init_from",
                   help="checkpoint whose model weights seed a fresh run")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (flag > file > default)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--curve-timesteps", help="comma-separated timesteps")
    e.add_argument("--seeds", type=int, default=2)
    e.add_argument("--steps", type=int, default=250)
    e.add_argument("--guidance", type=float, default=1.0)
    e.add_argument("--max-prompts", type=int, default=100)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-attn", help="dump attention heatmaps for a prompt")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--t", type=int, required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--steps", type=int, default=250)
    i.add_argument("--guidance", type=float, default=1.0)
    i.set_defaults(func=cmd_inspect_attn)

    a = sub.add_parser("ablate", help="train and compare loss-term variants")
    a.add_argument("--plan", required=True)
    a.add_argument("--out")
    a.add_argument("--assert", dest="assert_thresholds", action="store_true")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("repro-fig2b", help="attention/mask IoU across timesteps")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seeds", type=int, default=2)
    r.add_argument("--max-prompts", type=int, default=64)
    r.set_defaults(func=cmd_repro_fig2b)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CtcalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
