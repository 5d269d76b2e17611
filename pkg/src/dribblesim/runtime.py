"""Observation assembly, the dribble/recovery state machine, and the 50 Hz
deployment runtime that drives trained policies with delayed, held ball
estimates.

Observation row layout (width 37), stacked over a 15-step history:

    command (2) | ball estimate, body frame (3) | q (12) | qd (12) |
    gravity unit vector, body frame (3) | global yaw (1) | timing refs (4)

The recovery policy is proprioception-only (width 39):

    q (12) | qd (12) | gravity body (3) | previous action (12)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .config import Config
from .gait import advance_gait_phase
from .simmath import quat_roll_pitch, rot2d, wrap_angle

DRIBBLE_OBS_WIDTH = 37
RECOVERY_OBS_WIDTH = 39


class WidthMismatch(ValueError):
    pass


class MissingPolicy(RuntimeError):
    """The state machine selected a mode with no loaded policy."""


def build_observation(command: np.ndarray, ball_estimate: np.ndarray,
                      q: np.ndarray, qd: np.ndarray, gravity_body: np.ndarray,
                      yaw_global: np.ndarray, theta_cmd: np.ndarray) -> np.ndarray:
    """One 37-wide row per lane, in the documented order."""
    row = np.concatenate(
        [
            command,
            ball_estimate,
            q,
            qd,
            gravity_body,
            yaw_global[..., None],
            theta_cmd,
        ],
        axis=-1,
    )
    if row.shape[-1] != DRIBBLE_OBS_WIDTH:
        raise WidthMismatch(f"observation width {row.shape[-1]} != {DRIBBLE_OBS_WIDTH}")
    return row


def build_recovery_observation(q: np.ndarray, qd: np.ndarray,
                               gravity_body: np.ndarray,
                               prev_action: np.ndarray) -> np.ndarray:
    row = np.concatenate([q, qd, gravity_body, prev_action], axis=-1)
    if row.shape[-1] != RECOVERY_OBS_WIDTH:
        raise WidthMismatch(f"observation width {row.shape[-1]} != {RECOVERY_OBS_WIDTH}")
    return row


class ObservationHistory:
    """Shift register of the last `depth` observation rows, zero-padded
    after reset (oldest row first)."""

    def __init__(self, n: int, width: int, depth: int = 15):
        self.buf = np.zeros((n, depth, width), dtype=np.float64)

    def push(self, rows: np.ndarray) -> None:
        self.buf[:, :-1, :] = self.buf[:, 1:, :]
        self.buf[:, -1, :] = rows

    def reset_lanes(self, idx) -> None:
        self.buf[idx] = 0.0

    def flat(self) -> np.ndarray:
        n = self.buf.shape[0]
        return self.buf.reshape(n, -1)

    def state_dict(self):
        return {"buf": self.buf.copy()}

    def load_state_dict(self, state):
        self.buf[...] = state["buf"]


@dataclass
class FsmState:
    mode: str = "dribble"          # "dribble" | "recovery"
    entered_at: float = 0.0


def fsm_transition(fsm: FsmState, roll: float, pitch: float, t: float,
                   cfg: Config) -> FsmState:
    """Hysteresis switching: enter recovery past 1.0 rad, return to dribbling
    only once both angles drop below 0.5 rad."""
    tilt = max(abs(roll), abs(pitch))
    if fsm.mode == "dribble" and tilt > cfg.runtime.fall_enter_rad:
        return FsmState("recovery", t)
    if fsm.mode == "recovery" and (
        abs(roll) < cfg.runtime.recover_exit_rad
        and abs(pitch) < cfg.runtime.recover_exit_rad
    ):
        return FsmState("dribble", t)
    return fsm


def global_frame_command(raw: np.ndarray, limit: float = 1.5) -> np.ndarray:
    """Clamp operator commands to the allowed range; commands are already
    expressed in the fixed global frame (the body frame of the first step)."""
    return np.clip(np.asarray(raw, dtype=np.float64), -limit, limit)


class CommandMailbox:
    """Single-producer latest-wins command handoff into the control tick."""

    def __init__(self):
        self._lock = threading.Lock()
        self._cmd = np.zeros(2)
        self._seq = 0

    def put(self, vx: float, vy: float) -> int:
        with self._lock:
            self._cmd = global_frame_command(np.array([vx, vy]))
            self._seq += 1
            return self._seq

    def latest(self) -> tuple[np.ndarray, int]:
        with self._lock:
            return self._cmd.copy(), self._seq


class DeploymentRuntime:
    """Single-instance 50 Hz control loop used by teleop and evaluation.

    Wraps one lane of the vectorized environment, runs the state machine,
    and evaluates the appropriate policy deterministically.
    """

    def __init__(self, env, dribble_policy, recovery_policy=None):
        from .env import DribbleEnv  # cycle guard

        assert isinstance(env, DribbleEnv)
        self.env = env
        self.policies = {"dribble": dribble_policy, "recovery": recovery_policy}
        self.fsm = [FsmState() for _ in range(env.n)]
        depth = env.cfg.runtime.history_len
        self.recovery_history = ObservationHistory(env.n, RECOVERY_OBS_WIDTH, depth)
        self.fsm_enabled = recovery_policy is not None

    def tick(self, command: np.ndarray) -> np.ndarray:
        """One 50 Hz step: update FSM, build observations, act, step the env.

        Returns the raw policy action that was applied.
        """
        env = self.env
        env.set_command(global_frame_command(command))

        roll, pitch = quat_roll_pitch(env.world.base_quat)
        if self.fsm_enabled:
            for i in range(env.n):
                self.fsm[i] = fsm_transition(
                    self.fsm[i], float(roll[i]), float(pitch[i]),
                    float(env.world.time[i]), env.cfg,
                )

        rec_row = build_recovery_observation(
            env.world.q, env.world.qd, env.world.gravity_body(), env.action_prev
        )
        self.recovery_history.push(rec_row)

        action = np.zeros((env.n, 12))
        modes = [f.mode for f in self.fsm]
        for mode in set(modes):
            policy = self.policies.get(mode)
            if policy is None:
                raise MissingPolicy(f"no checkpoint loaded for {mode} policy")
            rows = [i for i, m in enumerate(modes) if m == mode]
            if mode == "dribble":
                obs = env.policy_observation()[rows]
            else:
                obs = self.recovery_history.flat()[rows]
            action[rows] = policy.act_deterministic(obs)
        env.step(action)
        return action

    def mode(self, lane: int = 0) -> str:
        return self.fsm[lane].mode


def timing_reference(t: np.ndarray, cfg: Config) -> np.ndarray:
    theta, _ = advance_gait_phase(t, cfg.gait)
    return theta


def ball_heading_errors(ball_vel_global: np.ndarray, command: np.ndarray):
    """Speed and wrapped heading series used by the tracking metrics."""
    speed = np.linalg.norm(ball_vel_global, axis=-1)
    cmd_speed = np.linalg.norm(command, axis=-1)
    psi_b = np.arctan2(ball_vel_global[..., 1], ball_vel_global[..., 0])
    psi_cmd = np.arctan2(command[..., 1], command[..., 0])
    return speed, cmd_speed, psi_b, psi_cmd, wrap_angle(psi_b - psi_cmd)


def world_to_global_2d(v_world: np.ndarray, yaw0: np.ndarray) -> np.ndarray:
    return rot2d(-yaw0, v_world)
