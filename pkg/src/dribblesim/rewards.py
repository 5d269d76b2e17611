"""Dribbling and recovery reward tables.

Both rewards compose as total = r_pos * exp(r_neg): the positive task terms
sum into r_pos with their (positive) weights, the penalty terms sum into
r_neg with their (negative) weights.  All functions are pure and vectorized
over a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RewardConfig
from .simmath import wrap_angle


@dataclass
class RewardBreakdown:
    """Per-term unweighted values plus the composed totals."""

    terms: dict[str, np.ndarray] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    r_pos: np.ndarray | float = 0.0
    r_neg: np.ndarray | float = 0.0
    total: np.ndarray | float = 0.0

    def weighted(self, name: str) -> np.ndarray:
        return self.terms[name] * self.weights[name]

    def scalar_means(self) -> dict[str, float]:
        out = {k: float(np.mean(v)) for k, v in self.terms.items()}
        out["r_pos"] = float(np.mean(self.r_pos))
        out["r_neg"] = float(np.mean(self.r_neg))
        out["total"] = float(np.mean(self.total))
        return out


@dataclass
class DribbleContext:
    """Everything the dribbling table reads, in a frame-consistent bundle.

    Planar vectors (ball velocity, command) are expressed in the episode
    global frame; angles are global-frame headings; `ball_body` and `hip_fr`
    are body-frame positions.
    """

    ball_vel: np.ndarray          # (N, 2)
    command: np.ndarray           # (N, 2)
    ball_body: np.ndarray         # (N, 3)
    hip_fr: np.ndarray            # (3,) or (N, 3)
    robot_ball_angle: np.ndarray  # (N,) heading of robot->ball, global frame
    yaw_global: np.ndarray        # (N,)
    kappa: np.ndarray             # (N, 4) desired contact state
    foot_forces: np.ndarray       # (N, 4, 3)
    foot_vel_xy: np.ndarray       # (N, 4, 2)
    q: np.ndarray                 # (N, 12)
    qd: np.ndarray                # (N, 12)
    qdd: np.ndarray               # (N, 12)
    tau: np.ndarray               # (N, 12)
    gravity_body: np.ndarray      # (N, 3)
    action: np.ndarray            # (N, 12)
    action_prev: np.ndarray       # (N, 12)
    action_prev2: np.ndarray      # (N, 12)
    q_lo: np.ndarray              # (12,)
    q_hi: np.ndarray              # (12,)
    hip_thigh_collision: np.ndarray  # (N,) bool


def _compose(terms: dict[str, np.ndarray], weights: dict[str, float]) -> RewardBreakdown:
    r_pos = 0.0
    r_neg = 0.0
    for name, w in weights.items():
        if w >= 0.0:
            r_pos = r_pos + w * terms[name]
        else:
            r_neg = r_neg + w * terms[name]
    return RewardBreakdown(terms, weights, r_pos, r_neg, r_pos * np.exp(r_neg))


def dribble_reward(ctx: DribbleContext, cfg: RewardConfig) -> RewardBreakdown:
    s = cfg.scales
    w = cfg.dribble

    vel_err = ctx.ball_vel - ctx.command
    psi_b = np.arctan2(ctx.ball_vel[..., 1], ctx.ball_vel[..., 0])
    psi_cmd = np.arctan2(ctx.command[..., 1], ctx.command[..., 0])
    align_ref = psi_cmd if cfg.align_to_command else psi_b
    e_rbcmd = wrap_angle(ctx.robot_ball_angle - align_ref)
    e_rbbase = wrap_angle(ctx.yaw_global - psi_b)

    dist = ctx.ball_body - ctx.hip_fr
    speed_gap = np.linalg.norm(ctx.command, axis=-1) - np.linalg.norm(ctx.ball_vel, axis=-1)

    f_sq = (ctx.foot_forces ** 2).sum(axis=-1)
    v_sq = (ctx.foot_vel_xy ** 2).sum(axis=-1)

    below = ctx.q < ctx.q_lo
    above = ctx.q > ctx.q_hi

    terms = {
        "ball_velocity": np.exp(-s.vel * (vel_err ** 2).sum(axis=-1)),
        "robot_ball_distance": np.exp(-s.pos * (dist ** 2).sum(axis=-1)),
        "yaw_alignment": np.exp(-s.yaw * (e_rbcmd ** 2 + e_rbbase ** 2)),
        "ball_velocity_norm": np.exp(-s.norm * speed_gap ** 2),
        "ball_velocity_angle": 1.0 - wrap_angle(psi_b - psi_cmd) ** 2 / np.pi ** 2,
        "swing_schedule": ((1.0 - ctx.kappa) * np.exp(-s.contact_force * f_sq)).mean(axis=-1),
        "stance_schedule": (ctx.kappa * np.exp(-s.contact_vel * v_sq)).mean(axis=-1),
        "joint_limit": (below | above).sum(axis=-1).astype(np.float64),
        "joint_torque": (ctx.tau ** 2).sum(axis=-1),
        "joint_velocity": np.sqrt((ctx.qd ** 2).sum(axis=-1)),
        "joint_acceleration": np.sqrt((ctx.qdd ** 2).sum(axis=-1)),
        "hip_thigh_collision": ctx.hip_thigh_collision.astype(np.float64),
        "projected_gravity": (ctx.gravity_body[..., :2] ** 2).sum(axis=-1),
        "action_smoothing": ((ctx.action_prev - ctx.action) ** 2).sum(axis=-1),
        "action_smoothing2": (
            (ctx.action_prev2 - 2.0 * ctx.action_prev + ctx.action) ** 2
        ).sum(axis=-1),
    }
    weights = {k: getattr(w, k) for k in terms}
    return _compose(terms, weights)


@dataclass
class RecoveryContext:
    gravity_body: np.ndarray   # (N, 3)
    body_height: np.ndarray    # (N,) above local ground
    q: np.ndarray              # (N, 12)
    foot_heights: np.ndarray   # (N, 4) clearance above ground
    tau: np.ndarray            # (N, 12)
    action: np.ndarray         # (N, 12)


def recovery_reward(ctx: RecoveryContext, cfg: RewardConfig,
                    h_target: float, q_standing: np.ndarray) -> RewardBreakdown:
    w = cfg.recovery
    g_z = ctx.gravity_body[..., 2]
    gate = (g_z < cfg.upright_gate).astype(np.float64)

    height_frac = (h_target - ctx.body_height) / h_target
    pose_err = ((ctx.q - q_standing) ** 2).sum(axis=-1)

    terms = {
        "orientation": (0.5 - 0.5 * g_z) ** 2,
        "body_height": gate * (1.0 - np.clip(height_frac ** 2, 0.0, 1.0)),
        "body_pose": gate * (1.0 - np.clip(pose_err / cfg.pose_denominator, 0.0, 1.0)),
        "foot_height": gate * np.exp(
            -cfg.foot_height_scale * (ctx.foot_heights ** 2).sum(axis=-1)
        ),
        "action": (ctx.action ** 2).sum(axis=-1),
        "joint_torque": (ctx.tau ** 2).sum(axis=-1),
    }
    weights = {k: getattr(w, k) for k in terms}
    return _compose(terms, weights)
