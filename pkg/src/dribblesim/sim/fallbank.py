"""Pre-generated bank of settled fall configurations for recovery resets.

The bank is produced by dropping a batch of robots from random orientations
and joint poses, letting them settle under held joint targets, and recording
the resulting states.
"""

from __future__ import annotations

import numpy as np

from ..config import Config
from ..simmath import quat_from_euler
from .. import rng as crng
from ..io_container import load_arrays, save_arrays
from .world import VecWorld

BANK_FIELDS = ("base_pos", "base_quat", "base_lin_vel", "base_ang_vel", "q", "qd")


def generate_fall_bank(cfg: Config, count: int = 1000, seed: int = 0,
                       settle_time: float = 1.5) -> dict[str, np.ndarray]:
    world = VecWorld(count, cfg, mode="recovery")
    keys = crng.hash_u64(seed, np.arange(count, dtype=np.uint64), crng.CH_INIT)
    u = crng.keyed_uniform(keys, crng.CH_RESET, lanes=18)

    roll = (u[:, 0] * 2.0 - 1.0) * np.pi
    pitch = (u[:, 1] * 2.0 - 1.0) * np.pi / 2.0
    yaw = (u[:, 2] * 2.0 - 1.0) * np.pi
    world.base_quat[:] = quat_from_euler(roll, pitch, yaw)
    world.base_pos[:] = 0.0
    world.base_pos[:, 2] = 0.45 + u[:, 3] * 0.25
    world.base_lin_vel[:] = 0.0
    world.base_ang_vel[:] = (u[:, 4:7] * 2.0 - 1.0) * 2.0
    q = world.q_lo + u[:, 6:18] * (world.q_hi - world.q_lo)
    world.q[:] = q
    world.qd[:] = 0.0
    world.prev_q_des[:] = q
    world.ball_pos[:] = [5.0, 5.0, cfg.ball.radius]
    world._refresh_feet()
    world.foot_vel_world[:] = 0.0

    steps = int(round(settle_time / cfg.sim.control_dt))
    hold = world.q.copy()
    for _ in range(steps):
        world.step(hold)
    return {k: getattr(world, k).copy() for k in BANK_FIELDS}


def save_fall_bank(path: str, bank: dict[str, np.ndarray]) -> None:
    save_arrays(path, bank)


def load_fall_bank(path: str) -> dict[str, np.ndarray]:
    return load_arrays(path)
