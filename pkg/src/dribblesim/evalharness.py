"""Scripted evaluation protocol, terrain presets, and tracking metrics.

A trial drives the fixed forward / stop / return script and counts success
the way the deployment protocol does: the trial fails on loss of ball
control; falls are tolerated when the robot recovers autonomously and
regains the ball.  Trials run as parallel lanes of one vectorized
environment with independent seeds.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import TERRAIN_PRESETS, Config, TerrainPreset
from .env import DribbleEnv
from .runtime import DeploymentRuntime, ball_heading_errors, world_to_global_2d
from .simmath import rot2d


class MissingCheckpoint(RuntimeError):
    pass


@dataclass
class ScriptedTrajectory:
    """Phases of (global-frame command, duration); the final phase runs until
    its end condition (return to the start line) or the trial timeout."""

    phases: list[tuple[tuple[float, float], float]]

    def __post_init__(self):
        if any(d <= 0 for _, d in self.phases):
            raise ValueError("phase durations must be positive")

    def command_at(self, t: float) -> np.ndarray:
        acc = 0.0
        for cmd, dur in self.phases:
            acc += dur
            if t < acc:
                return np.asarray(cmd, dtype=np.float64)
        return np.asarray(self.phases[-1][0], dtype=np.float64)

    def total_time(self) -> float:
        return sum(d for _, d in self.phases)


def standard_script(cfg: Config) -> ScriptedTrajectory:
    e = cfg.eval
    return ScriptedTrajectory([
        ((e.forward_speed, 0.0), e.forward_time),
        ((0.0, 0.0), e.stop_time),
        ((-e.forward_speed, 0.0), e.trial_timeout),
    ])


@dataclass
class TrialResult:
    success: bool
    failure_cause: str | None
    falls: int
    recoveries: int
    mean_velocity_error: float
    distance_traveled: float
    duration: float


@dataclass
class EvalReport:
    preset: str
    out_of_distribution: bool
    trials: list[TrialResult] = field(default_factory=list)

    @property
    def successes(self) -> int:
        return sum(t.success for t in self.trials)

    @property
    def score(self) -> str:
        return f"{self.successes}/{len(self.trials)}"

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "out_of_distribution": self.out_of_distribution,
            "score": self.score,
            "trials": [dataclasses.asdict(t) for t in self.trials],
        }


def preset_in_distribution(preset: TerrainPreset, cfg: Config) -> bool:
    r = cfg.ranges
    checks = [
        r.drag_coeff[0] <= preset.drag_coeff <= r.drag_coeff[1],
        r.friction[0] <= preset.friction <= r.friction[1],
        r.restitution[0] <= preset.restitution <= r.restitution[1],
        r.perlin_magnitude[0] <= preset.perlin_magnitude <= r.perlin_magnitude[1],
    ]
    return all(checks)


def detect_loss_of_control(distances: np.ndarray, dt: float, d_loss: float,
                           t_loss: float) -> tuple[bool, float]:
    """Failure when robot-ball distance exceeds d_loss for longer than t_loss.

    Returns (failed, time of failure or inf)."""
    over = np.asarray(distances) > d_loss
    needed = int(round(t_loss / dt))
    run = 0
    for i, o in enumerate(over):
        run = run + 1 if o else 0
        if run >= needed:
            return True, (i + 1) * dt
    return False, float("inf")


class NullAgent:
    """Zero joint targets: deliberately no control authority."""

    def bind(self, env: DribbleEnv) -> None:
        pass

    def act(self, env: DribbleEnv, command: np.ndarray) -> None:
        env.set_command(command)
        env.step(np.zeros((env.n, 12)))

    def mode(self, lane: int) -> str:
        return "dribble"


class OracleAgent:
    """Test double that steers the ball kinematically to the command and
    glides the robot alongside; validates harness counting under a perfect
    controller without touching the physics."""

    def bind(self, env: DribbleEnv) -> None:
        pass

    def act(self, env: DribbleEnv, command: np.ndarray) -> None:
        env.set_command(command)
        w = env.world
        dt = env.cfg.sim.control_dt
        vel_world = rot2d(w.yaw0, command)
        w.ball_vel[:, :2] = vel_world
        w.ball_vel[:, 2] = 0.0
        w.ball_pos[:, :2] += vel_world * dt
        offset = rot2d(w.yaw0, np.tile([-0.4, 0.0], (env.n, 1)))
        w.base_pos[:, :2] = w.ball_pos[:, :2] + offset
        w.base_lin_vel[:, :2] = vel_world
        w.step_count += 1
        w.time[:] = w.step_count * dt

    def mode(self, lane: int) -> str:
        return "dribble"


class PolicyAgent:
    """Runs trained policies through the deployment runtime (FSM active)."""

    def __init__(self, dribble_ac, recovery_ac=None):
        if dribble_ac is None:
            raise MissingCheckpoint("dribbling policy checkpoint required")
        self.dribble_ac = dribble_ac
        self.recovery_ac = recovery_ac
        self.runtime: DeploymentRuntime | None = None

    def bind(self, env: DribbleEnv) -> None:
        self.runtime = DeploymentRuntime(env, self.dribble_ac, self.recovery_ac)

    def act(self, env: DribbleEnv, command: np.ndarray) -> None:
        self.runtime.tick(command)

    def mode(self, lane: int) -> str:
        if self.runtime is None or not self.runtime.fsm_enabled:
            return "dribble"
        return self.runtime.fsm[lane].mode


def run_scripted_eval(agent, preset_name: str, trials: int, seed: int,
                      cfg: Config, log_dir: str | None = None) -> EvalReport:
    """Run the forward/stop/return script `trials` times in parallel lanes."""
    preset = TERRAIN_PRESETS[preset_name]
    script = standard_script(cfg)
    env = DribbleEnv(trials, cfg, seed=seed, mode="dribble",
                     fixed_command=np.zeros(2))
    env.noise_events_enabled = False
    env.terminate_on_fall = False  # falls are handled by the recovery FSM
    _apply_preset(env, preset)
    agent.bind(env)

    dt = env.cfg.sim.control_dt
    n_steps = int(round(cfg.eval.trial_timeout / dt))
    env.horizon = n_steps + 10  # trials are scripted; no mid-trial auto-reset
    start_x = world_to_global_2d(env.world.ball_pos[:, :2], env.world.yaw0)[:, 0]

    dist_hist = np.zeros((n_steps, trials))
    vel_err = np.zeros((n_steps, trials))
    completed = np.full(trials, np.inf)
    falls = np.zeros(trials, dtype=int)
    recoveries = np.zeros(trials, dtype=int)
    prev_modes = ["dribble"] * trials
    logs = [[] for _ in range(trials)] if log_dir is not None else None
    travel = np.zeros(trials)
    prev_ball = env.world.ball_pos[:, :2].copy()
    max_forward = np.zeros(trials)
    need_forward = cfg.eval.min_forward_fraction * cfg.eval.forward_speed * cfg.eval.forward_time

    for k in range(n_steps):
        t = k * dt
        cmd = script.command_at(t)
        cmds = np.tile(cmd, (trials, 1))
        agent.act(env, cmds)

        w = env.world
        rel = w.ball_pos[:, :2] - w.base_pos[:, :2]
        dist_hist[k] = np.sqrt((rel ** 2).sum(axis=1))
        ball_g = world_to_global_2d(w.ball_vel[:, :2], w.yaw0)
        vel_err[k] = np.sqrt(((ball_g - cmds) ** 2).sum(axis=1))
        travel += np.sqrt(((w.ball_pos[:, :2] - prev_ball) ** 2).sum(axis=1))
        prev_ball = w.ball_pos[:, :2].copy()

        for i in range(trials):
            mode = agent.mode(i)
            if mode == "recovery" and prev_modes[i] == "dribble":
                falls[i] += 1
            if mode == "dribble" and prev_modes[i] == "recovery":
                recoveries[i] += 1
            prev_modes[i] = mode

        ball_x = world_to_global_2d(w.ball_pos[:, :2], w.yaw0)[:, 0]
        max_forward = np.maximum(max_forward, ball_x - start_x)
        in_return = t >= script.phases[0][1] + script.phases[1][1]
        if in_return:
            newly = (
                (ball_x <= start_x) & (max_forward >= need_forward)
                & np.isinf(completed)
            )
            completed[newly] = t

        if logs is not None:
            for i in range(trials):
                logs[i].append({
                    "t": t, "cmd": cmds[i].tolist(),
                    "ball_vel_global": ball_g[i].tolist(),
                    "robot_ball_distance": float(dist_hist[k, i]),
                    "mode": prev_modes[i],
                })
        if np.all(completed < np.inf):
            break

    report = EvalReport(preset.name, not preset_in_distribution(preset, cfg))
    for i in range(trials):
        lost, t_lost = detect_loss_of_control(
            dist_hist[:k + 1, i], dt, cfg.eval.loss_distance, cfg.eval.loss_time
        )
        done_t = completed[i]
        success = bool(done_t < t_lost and np.isfinite(done_t))
        cause = None if success else "loss_of_control"
        report.trials.append(TrialResult(
            success=success,
            failure_cause=cause,
            falls=int(falls[i]),
            recoveries=int(recoveries[i]),
            mean_velocity_error=float(vel_err[:k + 1, i].mean()),
            distance_traveled=float(travel[i]),
            duration=float(min(done_t, (k + 1) * dt)),
        ))
    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
        for i, rows in enumerate(logs):
            with open(os.path.join(log_dir, f"trial_{i:02d}.jsonl"), "w") as f:
                for row in rows:
                    f.write(json.dumps(row) + "\n")
    return report


def _apply_preset(env: DribbleEnv, preset: TerrainPreset) -> None:
    w = env.world
    w.drag_coeff[:] = preset.drag_coeff
    w.friction[:] = preset.friction
    w.restitution[:] = preset.restitution
    w.terrain_magnitude[:] = preset.perlin_magnitude


def compute_tracking_metrics(log_path: str, out_csv: str | None = None) -> dict:
    """Polar tracking series from a per-trial JSONL log: speed and wrapped
    heading of the ball velocity against the command."""
    ts, ball, cmd = [], [], []
    with open(log_path) as f:
        for line in f:
            row = json.loads(line)
            ts.append(row["t"])
            ball.append(row["ball_vel_global"])
            cmd.append(row["cmd"])
    ball = np.asarray(ball)
    cmd = np.asarray(cmd)
    speed, cmd_speed, psi_b, psi_cmd, head_err = ball_heading_errors(ball, cmd)
    metrics = {
        "t": np.asarray(ts),
        "ball_speed": speed,
        "cmd_speed": cmd_speed,
        "ball_heading": psi_b,
        "cmd_heading": psi_cmd,
        "heading_error": head_err,
        "speed_error": np.abs(speed - cmd_speed),
    }
    if out_csv is not None:
        cols = list(metrics)
        with open(out_csv, "w") as f:
            f.write(",".join(cols) + "\n")
            for i in range(len(ts)):
                f.write(",".join(f"{metrics[c][i]:.6f}" for c in cols) + "\n")
    return metrics
