"""Forward kinematics of the four 3-DOF legs.

Each leg is an abduction joint rotating about the body x axis, followed by a
lateral hip link, then thigh and calf joints rotating about the (abducted)
y axis.  Zero angles point the leg straight down.  Legs are massless: only
their endpoint geometry matters to the dynamics.
"""

from __future__ import annotations

import numpy as np

from ..config import RobotConstants

LEG_NAMES = ("FR", "FL", "RR", "RL")


def leg_forward_kinematics(q_leg: np.ndarray, leg_index: int, robot: RobotConstants) -> np.ndarray:
    """Foot position in the body frame for one leg.

    q_leg is (..., 3) = (abduction, thigh, calf) angles in radians.
    """
    q = np.asarray(q_leg, dtype=np.float64)
    pts = _chain_points(q[..., None, :], robot, np.array([robot.leg_sides()[leg_index]]))
    return robot.hip_positions()[leg_index] + pts["foot"][..., 0, :]


def all_feet_body(q: np.ndarray, robot: RobotConstants) -> np.ndarray:
    """Foot positions (.., 4, 3) in the body frame from q (.., 12)."""
    q4 = np.asarray(q, dtype=np.float64).reshape(*q.shape[:-1], 4, 3)
    abd, thigh, calf = q4[..., 0], q4[..., 1], q4[..., 2]
    s1, c1 = np.sin(thigh), np.cos(thigh)
    s12, c12 = np.sin(thigh + calf), np.cos(thigh + calf)
    c0, s0 = np.cos(abd), np.sin(abd)
    ly = robot.leg_sides() * robot.link_hip
    fx = -robot.link_thigh * s1 - robot.link_calf * s12
    fz = -robot.link_thigh * c1 - robot.link_calf * c12
    out = np.empty(q4.shape)
    out[..., 0] = fx
    out[..., 1] = c0 * ly - s0 * fz
    out[..., 2] = s0 * ly + c0 * fz
    return robot.hip_positions() + out


def chain_points_body(q: np.ndarray, robot: RobotConstants) -> dict[str, np.ndarray]:
    """Thigh origin, knee, thigh midpoint, and foot for all legs, body frame.

    All outputs are (.., 4, 3).  Hip mount points are constant and available
    from ``robot.hip_positions()``.
    """
    q4 = np.asarray(q, dtype=np.float64).reshape(*q.shape[:-1], 4, 3)
    pts = _chain_points(q4, robot, robot.leg_sides())
    hips = robot.hip_positions()
    out = {k: hips + v for k, v in pts.items()}
    out["hip"] = np.broadcast_to(hips, out["foot"].shape)
    return out


def _chain_points(q4: np.ndarray, robot: RobotConstants, sides: np.ndarray) -> dict[str, np.ndarray]:
    """Chain points relative to the hip mount; q4 is (..., L, 3)."""
    abd, thigh, calf = q4[..., 0], q4[..., 1], q4[..., 2]
    s1, c1 = np.sin(thigh), np.cos(thigh)
    s12, c12 = np.sin(thigh + calf), np.cos(thigh + calf)
    c0, s0 = np.cos(abd), np.sin(abd)

    ly = sides * robot.link_hip
    knee_x = -robot.link_thigh * s1
    knee_z = -robot.link_thigh * c1
    foot_x = knee_x - robot.link_calf * s12
    foot_z = knee_z - robot.link_calf * c12

    def rot_abd(px, py, pz):
        return np.stack([px, c0 * py - s0 * pz, s0 * py + c0 * pz], axis=-1)

    zeros = np.zeros_like(c0)
    thigh_origin = rot_abd(zeros, ly + zeros, zeros)
    knee = rot_abd(knee_x, ly + zeros, knee_z)
    foot = rot_abd(foot_x, ly + zeros, foot_z)
    thigh_mid = rot_abd(0.5 * knee_x, ly + zeros, 0.5 * knee_z)
    return {"thigh_origin": thigh_origin, "knee": knee, "thigh_mid": thigh_mid, "foot": foot}
