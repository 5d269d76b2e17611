"""Episode dynamics sampling and runtime noise events.

Every draw is keyed by (episode key, step counter, channel) through the
counter-based RNG, so noise streams are independent across environments and
replay identically regardless of batching.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import rng as crng
from .config import Config, RandomizationRanges
from .sim.world import GRAVITY, VecWorld


@dataclass(frozen=True)
class EpisodeDynamics:
    """One concrete draw of every randomized parameter, fixed for an episode.

    Arrays carry a leading batch axis (one row per environment instance).
    """

    payload_mass: np.ndarray        # (N,)
    motor_strength: np.ndarray      # (N, 12)
    joint_calibration: np.ndarray   # (N, 12)
    friction: np.ndarray            # (N,)
    restitution: np.ndarray         # (N,)
    com_displacement: np.ndarray    # (N, 3)
    ball_mass: np.ndarray           # (N,)
    drag_coeff: np.ndarray          # (N,)
    camera_mean_arrival: np.ndarray  # (N,) seconds
    frame_drop_prob: np.ndarray     # (N,)
    actuator_lag_tau: np.ndarray    # (N,) seconds
    action_delay: np.ndarray        # (N,) physics substeps
    perlin_magnitude: np.ndarray    # (N,) meters, recovery only
    gravity_noise_active: bool
    command: np.ndarray             # (N, 2) global frame m/s

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for f in fields(self):
            v = getattr(self, f.name)
            h.update(f.name.encode())
            if isinstance(v, np.ndarray):
                h.update(np.ascontiguousarray(v).tobytes())
            else:
                h.update(str(v).encode())
        return h.hexdigest()

    def apply_to_world(self, world: VecWorld, idx: np.ndarray | None = None) -> None:
        idx = np.arange(world.n) if idx is None else np.asarray(idx)
        robot = world.cfg.robot
        world.total_mass[idx] = robot.base_mass + self.payload_mass
        world.com_offset[idx] = self.com_displacement
        world.motor_strength[idx] = self.motor_strength
        world.joint_calib[idx] = self.joint_calibration
        world.friction[idx] = self.friction
        world.restitution[idx] = self.restitution
        world.ball_mass[idx] = self.ball_mass
        world.drag_coeff[idx] = self.drag_coeff
        world.actuator_lag_tau[idx] = self.actuator_lag_tau
        world.action_delay[idx] = self.action_delay
        world.terrain_magnitude[idx] = self.perlin_magnitude


def _u(keys, lane_tag, lanes=None):
    return crng.keyed_uniform(keys, crng.CH_EPISODE, lane_tag, lanes=lanes)


def _span(u, rng: tuple[float, float]):
    return rng[0] + (rng[1] - rng[0]) * u


def sample_episode_dynamics(episode_keys: np.ndarray, mode: str,
                            ranges: RandomizationRanges) -> EpisodeDynamics:
    """Uniform draws within the configured ranges; terrain and gravity
    randomization only activate in recovery mode."""
    keys = np.asarray(episode_keys, dtype=np.uint64)
    n = keys.shape[0]
    recovery = mode == "recovery"

    delay_lo, delay_hi = ranges.action_delay_substeps
    delay = delay_lo + np.floor(_u(keys, 11) * (delay_hi - delay_lo + 1)).astype(np.int64)
    delay = np.minimum(delay, delay_hi)

    return EpisodeDynamics(
        payload_mass=_span(_u(keys, 1), ranges.payload_mass),
        motor_strength=_span(_u(keys, 2, lanes=12), ranges.motor_strength),
        joint_calibration=_span(_u(keys, 3, lanes=12), ranges.joint_calibration),
        friction=_span(_u(keys, 4), ranges.friction),
        restitution=_span(_u(keys, 5), ranges.restitution),
        com_displacement=_span(_u(keys, 6, lanes=3), ranges.com_displacement),
        ball_mass=_span(_u(keys, 7), ranges.ball_mass),
        drag_coeff=_span(_u(keys, 8), ranges.drag_coeff),
        camera_mean_arrival=_span(_u(keys, 9), ranges.camera_mean_arrival),
        frame_drop_prob=_span(_u(keys, 10), ranges.frame_drop_prob),
        actuator_lag_tau=_span(_u(keys, 12), ranges.actuator_lag_tau),
        action_delay=delay,
        perlin_magnitude=(
            _span(_u(keys, 13), ranges.perlin_magnitude) if recovery else np.zeros(n)
        ),
        gravity_noise_active=recovery,
        command=_span(_u(keys, 14, lanes=2), ranges.command),
    )


def maybe_teleport_ball(step_count: np.ndarray, episode_keys: np.ndarray,
                        ball_pos: np.ndarray, cfg: Config,
                        control_dt: float) -> np.ndarray:
    """Displace the ball uniformly within a disk at fixed regular intervals.

    Returns the boolean fire mask; ball_pos is updated in place.
    """
    interval = int(round(cfg.noise.teleport_interval / control_dt))
    fire = (step_count > 0) & (step_count % interval == 0)
    if not np.any(fire):
        return fire
    u = crng.keyed_uniform(
        np.asarray(episode_keys, dtype=np.uint64),
        step_count.astype(np.uint64), crng.CH_TELEPORT, lanes=2,
    )
    r = cfg.noise.teleport_radius * np.sqrt(u[:, 0])
    ang = 2.0 * np.pi * u[:, 1]
    ball_pos[fire, 0] += (r * np.cos(ang))[fire]
    ball_pos[fire, 1] += (r * np.sin(ang))[fire]
    return fire


def perturb_ball_velocity(step_count: np.ndarray, episode_keys: np.ndarray,
                          ball_vel: np.ndarray, cfg: Config,
                          control_dt: float) -> np.ndarray:
    """Add a planar velocity kick with bounded random magnitude at intervals."""
    interval = int(round(cfg.noise.kick_interval / control_dt))
    fire = (step_count > 0) & (step_count % interval == 0)
    if not np.any(fire):
        return fire
    u = crng.keyed_uniform(
        np.asarray(episode_keys, dtype=np.uint64),
        step_count.astype(np.uint64), crng.CH_KICK, lanes=2,
    )
    lo, hi = cfg.noise.kick_speed
    mag = lo + (hi - lo) * u[:, 0]
    ang = 2.0 * np.pi * u[:, 1]
    ball_vel[fire, 0] += (mag * np.cos(ang))[fire]
    ball_vel[fire, 1] += (mag * np.sin(ang))[fire]
    return fire


def sample_camera_delay(episode_keys: np.ndarray, arrival_index: np.ndarray,
                        mean_arrival: np.ndarray) -> np.ndarray:
    """Exponential inter-arrival times (Poisson process) for the next frame."""
    u = crng.keyed_uniform(
        np.asarray(episode_keys, dtype=np.uint64),
        np.asarray(arrival_index, dtype=np.uint64), crng.CH_CAMERA,
    )
    return -np.asarray(mean_arrival) * np.log(np.maximum(1.0 - u, 2.0 ** -53))


def corrupt_ball_observation(episode_keys: np.ndarray, step_count: np.ndarray,
                             ball_true: np.ndarray, halfwidth: float) -> np.ndarray:
    """Independent uniform noise per axis with the configured half-width."""
    u = crng.keyed_uniform(
        np.asarray(episode_keys, dtype=np.uint64),
        np.asarray(step_count, dtype=np.uint64), crng.CH_OBS_NOISE, lanes=3,
    )
    return ball_true + (2.0 * u - 1.0) * halfwidth


def perturb_gravity(step_count: np.ndarray, episode_keys: np.ndarray,
                    gravity: np.ndarray, cfg: Config, control_dt: float,
                    active: bool) -> np.ndarray:
    """Recovery-only: redraw a bounded gravity offset at fixed intervals."""
    if not active:
        return np.zeros(step_count.shape, dtype=bool)
    interval = int(round(cfg.noise.gravity_interval / control_dt))
    fire = (step_count > 0) & (step_count % interval == 0)
    if not np.any(fire):
        return fire
    u = crng.keyed_uniform(
        np.asarray(episode_keys, dtype=np.uint64),
        step_count.astype(np.uint64), crng.CH_GRAVITY, lanes=3,
    )
    lo, hi = cfg.ranges.gravity_noise
    noise = lo + (hi - lo) * u
    base = np.array([0.0, 0.0, -GRAVITY])
    gravity[fire] = base + noise[fire]
    return fire
