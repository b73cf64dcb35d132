"""Command-line entry point: ``needlethread <command> [options]``.

Exit codes: 0 on success, 1 for configuration errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, policy, scene, tactile, tail
from .env import InsertionEnv
from .harness import ConfigError

log = logging.getLogger("needlethread")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--resolution", help="sensor resolution WxH, e.g. 400x300")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="needlethread", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="measure thread length and grasp at a tail offset")
    _common(p)
    p.add_argument("--thread", type=int, default=2)
    p.add_argument("--length", type=float, default=0.14, help="true thread length (m)")
    p.add_argument("--tail", type=float, default=tail.DEFAULT_TAIL)

    p = sub.add_parser("collect-tip-data", help="simulate grasped tails for the tip regressor")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--thread", type=int, default=2)

    p = sub.add_parser("train-tip", help="fit the tip regressor on a dataset")
    _common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("train-policy", help="train an insertion policy on needle #2 / thread #2")
    _common(p)
    p.add_argument("--algo", choices=["ddpg", "ppo"])
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="run an evaluation campaign")
    _common(p)
    p.add_argument("--controller", choices=["policy", "vs"])
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--dump-images", action="store_true", help="write the first eyelet image of each cell as PGM")

    p = sub.add_parser("pipeline", help="run the end-to-end pipeline")
    _common(p)
    p.add_argument("--tip-model", required=True)
    p.add_argument("--controller", choices=["policy", "vs"])
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--needle", type=int, default=2)
    p.add_argument("--thread", type=int, default=2)
    p.add_argument("--angle", type=float, default=60.0)

    p = sub.add_parser("render", help="write eyelet and grip images as PGM")
    _common(p)
    p.add_argument("--needle", type=int, default=2)
    p.add_argument("--thread", type=int, default=2)
    p.add_argument("--angle", type=float, default=60.0)
    p.add_argument("--tip", type=float, nargs=2, metavar=("U", "V"), default=(0.0, 0.0), help="tip position on the gel (m)")
    return parser


def _config(args) -> harness.RunConfig:
    res = harness.parse_resolution(args.resolution) if args.resolution else None
    extra = {}
    for name in ("controller", "checkpoint", "episodes", "algo"):
        if getattr(args, name, None) is not None:
            extra[name] = getattr(args, name)
    if getattr(args, "steps", None) is not None:
        extra["total_steps"] = args.steps
    if getattr(args, "count", None) is not None:
        extra["tip_samples"] = args.count
    return harness.load_config(args.config, seed=args.seed, resolution=res, **extra)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_trace(args, cfg, out: Path) -> None:
    rng = np.random.default_rng(cfg.seed)
    world = scene.make_world(thread=args.thread, seed=cfg.seed, thread_length=args.length)
    sensor = tactile.grip_sensor(cfg.resolution, cfg.noise_sigma)
    first = tail.trace_to_tip(world, sensor, rng)
    res, _ = tail.trace_to_offset(world, sensor, first.d1, first.l_thread, args.tail, rng)
    rows = [[repr(x) for x in (res.d1, res.d2, res.l_thread, res.l_tail, res.theta, world.thread_length)]]
    _write_csv(out / "trace.csv", ["d1", "d2", "l_thread", "l_tail", "theta", "true_length"], rows)
    print(f"l_thread {res.l_thread:.5f} m (true {world.thread_length:.5f}), l_tail {res.l_tail:.4f} m, theta {res.theta:.2f} deg")


def cmd_collect(args, cfg, out: Path) -> None:
    rng = np.random.default_rng(cfg.seed)
    material = scene.THREADS[args.thread].material
    data = tail.collect_tip_dataset(cfg.tip_samples, rng, material, tactile.grip_sensor(cfg.resolution, cfg.noise_sigma))
    tail.save_dataset(data, out / "tip_dataset.csv")
    print(f"wrote {len(data)} samples")


def cmd_train_tip(args, cfg, out: Path) -> None:
    try:
        data = tail.load_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset {args.data}: {exc}") from exc
    model, err = tail.train_tip_model(data, n_train=int(round(0.8 * len(data))), epochs=cfg.tip_epochs, seed=cfg.seed)
    model.save(out / "tip_model.json")
    print(f"held-out mean distance error {1e3 * err:.2f} mm")


def cmd_train_policy(args, cfg, out: Path) -> None:
    env = InsertionEnv(cfg.env_config(2, 2, 90.0))
    if cfg.algo == "ddpg":
        res = policy.train_offpolicy(env, policy.DDPGConfig(total_steps=cfg.total_steps), seed=cfg.seed)
    else:
        res = policy.train_onpolicy(env, policy.PPOConfig(total_steps=cfg.total_steps), seed=cfg.seed)
    res.policy.save(out / "policy.json")
    harness.write_learning_curve(res.curve, out / "learning_curve.csv")
    first, last = res.window_means()
    print(f"episodes {len(res.curve)}, mean reward first 10% {first:.2f}, last 10% {last:.2f}")


def cmd_eval(args, cfg, out: Path) -> None:
    with open(out / "episodes.jsonl", "w") as records:
        table = harness.run_campaign(cfg, records)
    harness.report(table, out)
    if args.dump_images:
        for c in table.cells:
            if c.excluded:
                continue
            env = InsertionEnv(cfg.env_config(c.needle, c.thread, c.angle))
            env.reset(harness.episode_seed(cfg.seed, c.needle, c.thread, c.angle, 0))
            harness.write_pgm(out / f"eyelet_n{c.needle}_t{c.thread}_a{c.angle:g}.pgm", env.render())
    print(table.to_text(), end="")


def cmd_pipeline(args, cfg, out: Path) -> None:
    try:
        model = tail.TipModel.load(args.tip_model)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load tip model {args.tip_model}: {exc}") from exc
    env = InsertionEnv(cfg.env_config(args.needle, args.thread, args.angle))
    ctrl = harness.make_controller(cfg, env)
    with open(out / "pipeline.jsonl", "w") as fh:
        for ep in range(args.episodes):
            seed = harness.episode_seed(cfg.seed, args.needle, args.thread, args.angle, ep)
            rec = harness.run_full_pipeline(cfg, seed, model, ctrl, args.needle, args.thread, args.angle)
            fh.write(rec.to_json() + "\n")
            print(f"episode {ep}: {rec.outcome} (stage {rec.stage}, steps {rec.steps_taken})")


def cmd_render(args, cfg, out: Path) -> None:
    env = InsertionEnv(cfg.env_config(args.needle, args.thread, args.angle))
    env.reset(cfg.seed, initial_tip_uv=args.tip)
    harness.write_pgm(out / "eyelet.pgm", env.render())
    world = scene.make_world(thread=args.thread, seed=cfg.seed)
    world, _, _ = scene.glide_along_thread(world, world.thread_length - 0.01)
    harness.write_pgm(out / "grip.pgm", tactile.render_grip_image(world, tactile.grip_sensor(cfg.resolution, cfg.noise_sigma)))
    print(f"wrote {out / 'eyelet.pgm'} and {out / 'grip.pgm'}")


COMMANDS = {
    "trace": cmd_trace,
    "collect-tip-data": cmd_collect,
    "train-tip": cmd_train_tip,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
