"""Dataclass configuration tree with JSON loading and field-path validation.

All physical constants that are not fixed elsewhere (robot geometry, ground
model, reward scales, terrain presets) live here so sensitivity sweeps touch
one file.  ``load_config`` reports every bad field by its dotted path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Raised with a list of '<path>: <problem>' strings."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n" + "\n".join(problems))


@dataclass
class SimParams:
    """Integrator and ground-contact constants."""

    physics_dt: float = 0.005
    substeps_per_control: int = 4
    ground_stiffness: float = 22000.0      # N/m
    # damping scales with depth (Hunt-Crossley style) so grazing contacts
    # cannot produce force spikes; units N*s/m^2
    ground_damping: float = 2.5e5
    ground_force_cap: float = 300.0        # per contact point, N
    ground_tangent_gain: float = 400.0     # viscous cap inside Coulomb cone, N*s/m
    ball_ground_stiffness: float = 4000.0
    ball_ground_damping: float = 15.0
    default_friction: float = 0.8
    default_restitution: float = 0.3

    @property
    def control_dt(self) -> float:
        return self.physics_dt * self.substeps_per_control


@dataclass
class RobotConstants:
    """Reduced-order quadruped model: a 6-DOF base carrying four massless
    3-DOF legs.  Values approximate a small ~12 kg quadruped and are not
    measured from any specific robot."""

    base_mass: float = 12.0
    base_inertia: tuple[float, float, float] = (0.085, 0.25, 0.28)  # diag, kg m^2
    base_box_half_extents: tuple[float, float, float] = (0.2, 0.08, 0.057)
    # hip mount points in body frame, leg order FR, FL, RR, RL
    hip_x: float = 0.1881
    hip_y: float = 0.04675
    link_hip: float = 0.08   # abduction link, lateral
    link_thigh: float = 0.213
    link_calf: float = 0.213
    foot_radius: float = 0.02
    foot_effective_mass: float = 1.2     # for ball impact impulses, kg
    kp: float = 20.0
    kd: float = 0.5
    torque_limit: float = 23.5
    reflected_inertia: float = 0.025     # per joint, kg m^2
    joint_damping: float = 0.01
    max_joint_speed: float = 30.0        # integrator guard, rad/s
    # per-leg-joint limits (abduction, thigh, calf); mirrored across legs
    q_limit_abd: tuple[float, float] = (-0.86, 0.86)
    q_limit_thigh: tuple[float, float] = (-0.67, 4.0)
    q_limit_calf: tuple[float, float] = (-2.82, -0.89)
    stand_pose: tuple[float, float, float] = (0.0, 0.8, -1.6)
    action_scale: float = 0.35           # q_des = stand pose + scale * net output

    def hip_positions(self) -> np.ndarray:
        """Hip mount points in the body frame, order FR, FL, RR, RL."""
        x, y = self.hip_x, self.hip_y
        return np.array(
            [[x, -y, 0.0], [x, y, 0.0], [-x, -y, 0.0], [-x, y, 0.0]]
        )

    def leg_sides(self) -> np.ndarray:
        """+1 for left legs, -1 for right legs (abduction link direction)."""
        return np.array([-1.0, 1.0, -1.0, 1.0])

    def joint_limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.tile([self.q_limit_abd[0], self.q_limit_thigh[0], self.q_limit_calf[0]], 4)
        hi = np.tile([self.q_limit_abd[1], self.q_limit_thigh[1], self.q_limit_calf[1]], 4)
        return lo, hi

    def stand_q(self) -> np.ndarray:
        return np.tile(self.stand_pose, 4)

    def stand_height(self) -> float:
        t, c = self.stand_pose[1], self.stand_pose[2]
        return (
            self.link_thigh * np.cos(t)
            + self.link_calf * np.cos(t + c)
            + self.foot_radius
        )


@dataclass
class BallConstants:
    radius: float = 0.09     # size-3 ball, 18 cm diameter
    nominal_mass: float = 0.2


@dataclass
class GaitConfig:
    period: float = 0.5
    duty: float = 0.5
    offsets: tuple[float, float, float, float] = (0.0, 0.5, 0.5, 0.0)  # FR FL RR RL
    sharpness: float = 0.02  # phase-fraction width of the stance/swing sigmoid


@dataclass
class RewardScales:
    vel: float = 2.0      # ball-velocity tracking
    pos: float = 4.0      # robot-ball distance
    yaw: float = 1.0      # alignment angles
    norm: float = 2.0     # speed magnitude
    contact_force: float = 0.01
    contact_vel: float = 10.0


@dataclass
class DribbleWeights:
    ball_velocity: float = 0.5
    robot_ball_distance: float = 4.0
    yaw_alignment: float = 4.0
    ball_velocity_norm: float = 4.0
    ball_velocity_angle: float = 4.0
    swing_schedule: float = 4.0
    stance_schedule: float = 4.0
    joint_limit: float = -10.0
    joint_torque: float = -0.0001
    joint_velocity: float = -0.0001
    joint_acceleration: float = -2.5e-7
    hip_thigh_collision: float = -5.0
    projected_gravity: float = -5.0
    action_smoothing: float = -0.1
    action_smoothing2: float = -0.1


@dataclass
class RecoveryWeights:
    orientation: float = 1.0
    body_height: float = 1.0
    body_pose: float = 1.0
    foot_height: float = 1.0
    action: float = -1e-3
    joint_torque: float = -1e-5


@dataclass
class RewardConfig:
    scales: RewardScales = field(default_factory=RewardScales)
    dribble: DribbleWeights = field(default_factory=DribbleWeights)
    recovery: RecoveryWeights = field(default_factory=RecoveryWeights)
    upright_gate: float = -0.6           # recovery terms active when g_z below this
    pose_denominator: float = 20.0
    foot_height_scale: float = 10.0
    # alignment error defined against the ball-velocity direction as published;
    # flip to command direction with this switch
    align_to_command: bool = False


@dataclass
class RandomizationRanges:
    payload_mass: tuple[float, float] = (-1.0, 3.0)
    motor_strength: tuple[float, float] = (0.9, 1.1)
    joint_calibration: tuple[float, float] = (-0.02, 0.02)
    friction: tuple[float, float] = (0.40, 1.00)
    restitution: tuple[float, float] = (0.00, 1.00)
    com_displacement: tuple[float, float] = (-0.15, 0.15)
    ball_mass: tuple[float, float] = (0.159, 0.254)
    drag_coeff: tuple[float, float] = (0.0, 1.5)
    camera_mean_arrival: tuple[float, float] = (0.020, 0.060)  # s
    frame_drop_prob: tuple[float, float] = (0.3, 0.7)          # optional per-frame drop
    actuator_lag_tau: tuple[float, float] = (0.005, 0.025)     # s
    action_delay_substeps: tuple[int, int] = (0, 4)
    perlin_magnitude: tuple[float, float] = (0.0, 0.10)        # m, recovery only
    gravity_noise: tuple[float, float] = (-1.0, 1.0)           # m/s^2, recovery only
    command: tuple[float, float] = (-1.5, 1.5)


@dataclass
class NoiseConfig:
    teleport_interval: float = 7.0
    teleport_radius: float = 1.0
    kick_interval: float = 4.0
    kick_speed: tuple[float, float] = (0.0, 0.3)
    ball_obs_halfwidth: float = 0.05
    gravity_interval: float = 6.0
    use_frame_drop: bool = False


@dataclass
class CameraExtrinsics:
    """Camera pose in the body frame: position plus the principal axis the
    camera looks along (rotation built with +x image axis kept horizontal)."""

    position: tuple[float, float, float] = (0.28, 0.0, 0.0)
    look_dir: tuple[float, float, float] = (1.0, 0.0, -0.3)


@dataclass
class VisionConfig:
    image_width: int = 480
    image_height: int = 400
    fov_deg: float = 210.0
    focal_px: float = 0.0               # 0 -> derive from image circle and FOV
    pixel_jitter: float = 1.0
    min_bbox_px: float = 1.0
    front: CameraExtrinsics = field(default_factory=CameraExtrinsics)
    bottom: CameraExtrinsics = field(
        default_factory=lambda: CameraExtrinsics((0.1, 0.0, -0.05), (0.15, 0.0, -1.0))
    )


@dataclass
class RuntimeConfig:
    history_len: int = 15
    fall_enter_rad: float = 1.0
    recover_exit_rad: float = 0.5
    episode_length_s: float = 40.0
    # dribble-mode training ends an episode early when the robot falls; the
    # 40 s horizon is then a timeout, not the only reset path
    terminate_on_fall: bool = True
    fall_tilt_rad: float = 1.0
    min_base_height: float = 0.10
    vision_mode: str = "truth_noise"    # or "synthetic_fisheye"
    # fixed input scaling applied at the network boundary (not part of the
    # observation contract)
    obs_scale_qd: float = 0.05
    obs_scale_ball: float = 0.5


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    steps_per_rollout: int = 21
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    estimator_coef: float = 1.0
    clip: float = 0.2
    reward_normalization: bool = True
    max_grad_norm: float = 1.0
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_envs: int = 4096
    total_timesteps: int = 7_000_000_000
    init_log_std: float = -0.5
    policy_hidden: tuple[int, int, int] = (512, 256, 128)
    estimator_hidden: tuple[int, int] = (256, 128)
    detach_estimator_input: bool = True
    checkpoint_every_updates: int = 50
    worker_shards: int = 1


@dataclass
class EvalConfig:
    loss_distance: float = 2.0
    loss_time: float = 5.0
    trial_timeout: float = 40.0
    forward_speed: float = 1.5
    forward_time: float = 10.0
    stop_time: float = 5.0
    # the return leg only counts after the ball actually went forward by this
    # fraction of the commanded forward distance
    min_forward_fraction: float = 0.5
    # acceptance margins for the training smoke check; the binding assertion
    # is direction of improvement
    smoke_tracking_factor: float = 2.0
    smoke_estimator_ratio: float = 0.5


@dataclass
class TerrainPreset:
    name: str
    drag_coeff: float
    friction: float
    restitution: float
    perlin_magnitude: float = 0.0


# Estimated coefficients for named terrains; not measured values.
TERRAIN_PRESETS: dict[str, TerrainPreset] = {
    "tile": TerrainPreset("tile", 0.1, 0.9, 0.3),
    "grass": TerrainPreset("grass", 1.2, 0.8, 0.2),
    "sand": TerrainPreset("sand", 0.7, 0.45, 0.1),
    "snow": TerrainPreset("snow", 0.6, 0.4, 0.1),
}


@dataclass
class Config:
    sim: SimParams = field(default_factory=SimParams)
    robot: RobotConstants = field(default_factory=RobotConstants)
    ball: BallConstants = field(default_factory=BallConstants)
    gait: GaitConfig = field(default_factory=GaitConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ranges: RandomizationRanges = field(default_factory=RandomizationRanges)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> None:
        problems: list[str] = []
        dt_total = self.sim.physics_dt * self.sim.substeps_per_control
        if abs(dt_total - 0.02) > 1e-12:
            problems.append(
                f"sim.physics_dt*sim.substeps_per_control: must equal 0.02 s, got {dt_total}"
            )
        if not (0.0 < self.gait.duty < 1.0):
            problems.append(f"gait.duty: must be in (0,1), got {self.gait.duty}")
        for i, off in enumerate(self.gait.offsets):
            if not (0.0 <= off < 1.0):
                problems.append(f"gait.offsets[{i}]: must be in [0,1), got {off}")
        if not (0.0 < self.ppo.clip < 1.0):
            problems.append(f"ppo.clip: must be in (0,1), got {self.ppo.clip}")
        n_samples = self.ppo.n_envs * self.ppo.steps_per_rollout
        if n_samples % self.ppo.minibatches != 0:
            problems.append(
                "ppo.minibatches: must divide n_envs*steps_per_rollout "
                f"({n_samples}), got {self.ppo.minibatches}"
            )
        for name in ("vel", "pos", "yaw", "norm", "contact_force", "contact_vel"):
            v = getattr(self.reward.scales, name)
            if v <= 0:
                problems.append(f"reward.scales.{name}: must be positive, got {v}")
        if self.runtime.vision_mode not in ("truth_noise", "synthetic_fisheye"):
            problems.append(
                f"runtime.vision_mode: unknown mode {self.runtime.vision_mode!r}"
            )
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _from_dict(cls, data: Any, path: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected object, got {type(data).__name__}")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            problems.append(f"{where}: unknown field")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value, where, problems)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                problems.append(f"{where}: expected {len(default)} values")
            else:
                kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                problems.append(f"{where}: expected bool, got {value!r}")
            else:
                kwargs[key] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{where}: expected number, got {value!r}")
            else:
                kwargs[key] = type(default)(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                problems.append(f"{where}: expected string, got {value!r}")
            else:
                kwargs[key] = value
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> Config:
    problems: list[str] = []
    cfg = _from_dict(Config, data, "", problems)
    if problems:
        raise ConfigError(problems)
    cfg.validate()
    return cfg


def load_config(path: str | None = None, overrides: dict | None = None) -> Config:
    data: dict = {}
    if path is not None:
        with open(path) as f:
            data = json.load(f)
    if overrides:
        data = _deep_merge(data, overrides)
    return config_from_dict(data)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def save_config(cfg: Config, path: str) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
