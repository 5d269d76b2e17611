"""Command-line entry points: train, eval, teleop, plot, fallbank."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import Config, ConfigError, load_config, save_config


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults everywhere else)")
    p.add_argument("--seed", type=int, default=None)


def _load_cfg(args) -> Config:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dribblesim",
        description="Quadruped soccer-dribbling simulator, trainer, and teleop stack",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run PPO training")
    _add_config_arg(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--mode", choices=["dribble", "recovery"], default="dribble")
    p.add_argument("--steps", type=int, default=None, help="override total timesteps")
    p.add_argument("--envs", type=int, default=None, help="override environment count")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--fallbank", help="fall bank file (recovery mode)")

    p = sub.add_parser("eval", help="scripted dribbling evaluation")
    _add_config_arg(p)
    p.add_argument("--policy", help="dribbling policy checkpoint")
    p.add_argument("--recovery", help="recovery policy checkpoint")
    p.add_argument("--agent", choices=["policy", "oracle", "null"], default="policy")
    p.add_argument("--preset", default="tile")
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--out", help="write EvalReport JSON here")
    p.add_argument("--log-dir", help="write per-trial JSONL logs here")

    p = sub.add_parser("teleop", help="serve the live teleoperation session")
    _add_config_arg(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--recovery")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ws-port", type=int, default=8766)

    p = sub.add_parser("plot", help="emit plot-data series from logs")
    p.add_argument("--trial-log", help="per-trial JSONL from eval")
    p.add_argument("--metrics", help="training metrics JSONL")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fallbank", help="regenerate the recovery reset bank")
    _add_config_arg(p)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--out", required=True)
    return ap


def cmd_train(args) -> int:
    from .sim.fallbank import load_fall_bank
    from .trainer import Trainer

    cfg = _load_cfg(args)
    if args.envs is not None:
        cfg.ppo.n_envs = args.envs
        cfg.validate()
    bank = load_fall_bank(args.fallbank) if args.fallbank else None
    trainer = Trainer(cfg, args.out, mode=args.mode, fall_bank=bank)
    save_config(cfg, os.path.join(args.out, "config.json"))
    if args.resume:
        trainer.resume(args.resume)
    last = trainer.train(total_steps=args.steps)
    print(json.dumps({k: v for k, v in last.items() if k != "reward_terms"}))
    return 0


def cmd_eval(args) -> int:
    from .evalharness import NullAgent, OracleAgent, PolicyAgent, run_scripted_eval
    from .trainer import ActorCritic

    cfg = _load_cfg(args)
    if args.agent == "oracle":
        agent = OracleAgent()
    elif args.agent == "null":
        agent = NullAgent()
    else:
        if not args.policy:
            print("eval: --policy required for the policy agent", file=sys.stderr)
            return 2
        dribble = ActorCritic.load(args.policy, cfg)
        recovery = ActorCritic.load(args.recovery, cfg) if args.recovery else None
        agent = PolicyAgent(dribble, recovery)
    report = run_scripted_eval(agent, args.preset, args.trials, cfg.seed, cfg,
                               log_dir=args.log_dir)
    blob = json.dumps(report.to_dict(), indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(blob)
    print(blob)
    return 0


def cmd_teleop(args) -> int:
    from .env import DribbleEnv
    from .runtime import DeploymentRuntime
    from .teleop import TeleopServer
    from .trainer import ActorCritic

    cfg = _load_cfg(args)
    dribble = ActorCritic.load(args.policy, cfg)
    recovery = ActorCritic.load(args.recovery, cfg) if args.recovery else None
    env = DribbleEnv(1, cfg, seed=cfg.seed, fixed_command=np.zeros(2))
    env.noise_events_enabled = False
    env.terminate_on_fall = False
    runtime = DeploymentRuntime(env, dribble, recovery)
    server = TeleopServer(runtime, args.port, args.ws_port)
    print(f"teleop serving on tcp://127.0.0.1:{args.port} "
          f"ws://127.0.0.1:{args.ws_port}")
    server.serve_forever()
    return 0


def cmd_plot(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    wrote = []
    if args.trial_log:
        from .evalharness import compute_tracking_metrics

        out_csv = os.path.join(args.out_dir, "tracking.csv")
        compute_tracking_metrics(args.trial_log, out_csv)
        wrote.append(out_csv)
    if args.metrics:
        out_csv = os.path.join(args.out_dir, "training.csv")
        rows = []
        with open(args.metrics) as f:
            for line in f:
                rows.append(json.loads(line))
        if rows:
            keys = [k for k in rows[0] if not isinstance(rows[0][k], dict)]
            with open(out_csv, "w") as f:
                f.write(",".join(keys) + "\n")
                for r in rows:
                    f.write(",".join(str(r.get(k, "")) for k in keys) + "\n")
            wrote.append(out_csv)
    if not wrote:
        print("plot: nothing to do (pass --trial-log and/or --metrics)",
              file=sys.stderr)
        return 2
    print("\n".join(wrote))
    return 0


def cmd_fallbank(args) -> int:
    from .sim.fallbank import generate_fall_bank, save_fall_bank

    cfg = _load_cfg(args)
    bank = generate_fall_bank(cfg, count=args.count, seed=cfg.seed)
    save_fall_bank(args.out, bank)
    print(f"wrote {args.count} fall configurations to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        handler = {
            "train": cmd_train,
            "eval": cmd_eval,
            "teleop": cmd_teleop,
            "plot": cmd_plot,
            "fallbank": cmd_fallbank,
        }[args.cmd]
        return handler(args)
    except ConfigError as e:
        print(f"dribblesim {args.cmd}: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as e:
        print(f"dribblesim {args.cmd}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
