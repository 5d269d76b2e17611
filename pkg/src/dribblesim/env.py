"""Vectorized training environment: physics, episode randomization, noise
events, delayed ball perception, observation stacks, and rewards.

One instance owns N independent lanes.  All per-step randomness is keyed by
(run seed, lane, episode, step), so trajectories are reproducible and
independent of how lanes are sharded across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import rng as crng
from .config import Config
from .gait import advance_gait_phase, desired_contact
from .randomization import (
    EpisodeDynamics,
    corrupt_ball_observation,
    maybe_teleport_ball,
    perturb_ball_velocity,
    perturb_gravity,
    sample_camera_delay,
    sample_episode_dynamics,
)
from .rewards import DribbleContext, RecoveryContext, dribble_reward, recovery_reward
from .runtime import (
    DRIBBLE_OBS_WIDTH,
    ObservationHistory,
    build_observation,
    world_to_global_2d,
)
from .sim.world import VecWorld
from .simmath import quat_roll_pitch, quat_rotate_inverse, quat_yaw, wrap_angle
from .vision import (
    CameraModel,
    FisheyeIntrinsics,
    detection_to_ball_position,
    fuse_detections,
    synth_detect,
)

ESTIMATOR_DIM = 6  # body velocity (3) + ball velocity (2) + drag coefficient (1)


class DribbleEnv:
    """N lockstep environment lanes for one mode (dribble or recovery)."""

    def __init__(self, n: int, cfg: Config, seed: int = 0, mode: str = "dribble",
                 fall_bank: dict | None = None, worker_shards: int = 1,
                 fixed_command: np.ndarray | None = None):
        cfg.validate()
        self.n = n
        self.cfg = cfg
        self.seed = seed
        self.mode = mode
        self.fall_bank = fall_bank
        self.worker_shards = max(1, worker_shards)
        self._pool = (
            ThreadPoolExecutor(max_workers=self.worker_shards)
            if self.worker_shards > 1 else None
        )
        self.world = VecWorld(n, cfg, mode)
        self.noise_events_enabled = True
        self.terminate_on_fall = cfg.runtime.terminate_on_fall
        self.horizon = int(round(cfg.runtime.episode_length_s / cfg.sim.control_dt))
        self.episode = np.zeros(n, dtype=np.int64)
        self.command = np.zeros((n, 2))
        self._fixed_command = fixed_command
        self.action = np.zeros((n, 12))
        self.action_prev = np.zeros((n, 12))
        self.action_prev2 = np.zeros((n, 12))
        self.history = ObservationHistory(n, DRIBBLE_OBS_WIDTH, cfg.runtime.history_len)
        self.ball_estimate = np.zeros((n, 3))
        self.camera_next_arrival = np.zeros(n)
        self.camera_arrival_index = np.zeros(n, dtype=np.int64)
        self.dyn: EpisodeDynamics | None = None

        intr = FisheyeIntrinsics.from_config(cfg.vision)
        self.cameras = {
            "front": CameraModel.from_config(intr, cfg.vision.front, "front"),
            "bottom": CameraModel.from_config(intr, cfg.vision.bottom, "bottom"),
        }

        self._obs_scale = self._make_obs_scale()
        self.reset_all()

    # ------------------------------------------------------------------ scale
    def _make_obs_scale(self) -> np.ndarray:
        s = np.ones(DRIBBLE_OBS_WIDTH)
        s[2:5] = self.cfg.runtime.obs_scale_ball
        s[17:29] = self.cfg.runtime.obs_scale_qd
        return np.tile(s, self.cfg.runtime.history_len)

    # ------------------------------------------------------------------ reset
    def episode_keys(self, idx: np.ndarray) -> np.ndarray:
        return crng.hash_u64(
            self.seed, np.asarray(idx, dtype=np.uint64),
            self.episode[idx].astype(np.uint64), crng.CH_EPISODE,
        )

    def _refresh_key_cache(self) -> None:
        self._key_cache = self.episode_keys(np.arange(self.n))

    def reset_all(self) -> None:
        self.reset_lanes(np.arange(self.n))

    def reset_lanes(self, idx: np.ndarray) -> None:
        idx = np.asarray(idx)
        keys = self.episode_keys(idx)
        dyn = sample_episode_dynamics(keys, self.mode, self.cfg.ranges)
        if self.dyn is None or len(idx) == self.n:
            self.dyn = dyn
        else:
            self.dyn = _merge_dynamics(self.dyn, dyn, idx)
        if self.mode == "dribble":
            self.world.reset_dribble(keys, idx)
        else:
            self.world.reset_recovery(keys, self.fall_bank, idx)
        dyn.apply_to_world(self.world, idx)

        if self._fixed_command is not None:
            self.command[idx] = self._fixed_command
        else:
            self.command[idx] = dyn.command
        self.action[idx] = 0.0
        self.action_prev[idx] = 0.0
        self.action_prev2[idx] = 0.0
        self.history.reset_lanes(idx)
        self.camera_arrival_index[idx] = 0
        self.camera_next_arrival[idx] = 0.0
        w = self.world
        self.ball_estimate[idx] = quat_rotate_inverse(
            w.base_quat[idx], w.ball_pos[idx] - w.base_pos[idx]
        )
        self._refresh_key_cache()
        # first observation row lands in the newest slot; older slots stay zero
        theta, _ = advance_gait_phase(w.time[idx], self.cfg.gait)
        self.history.buf[idx, -1, :] = build_observation(
            self.command[idx], self.ball_estimate[idx], w.q[idx], w.qd[idx],
            quat_rotate_inverse(w.base_quat[idx], np.tile([0.0, 0.0, -1.0], (len(idx), 1))),
            wrap_angle(quat_yaw(w.base_quat[idx]) - w.yaw0[idx]), theta,
        )

    def set_command(self, command: np.ndarray) -> None:
        self.command[:] = np.atleast_2d(command)

    # ------------------------------------------------------------------- step
    def step(self, action: np.ndarray):
        """Advance all lanes one control step.

        action is the raw policy output (N, 12); joint targets are
        stand pose + action_scale * action.  Returns (reward_breakdown,
        dones, info dict).
        """
        self.action_prev2[:] = self.action_prev
        self.action_prev[:] = self.action
        self.action[:] = action
        q_des = self.cfg.robot.stand_q() + self.cfg.robot.action_scale * action

        if self._pool is None or self.worker_shards == 1:
            self.world.step(q_des)
        else:
            bounds = np.linspace(0, self.n, self.worker_shards + 1).astype(int)
            futures = [
                self._pool.submit(self.world.step, q_des[lo:hi], slice(int(lo), int(hi)))
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
            ]
            for f in futures:
                f.result()

        keys = self._key_cache
        if self.noise_events_enabled:
            maybe_teleport_ball(self.world.step_count, keys, self.world.ball_pos,
                                self.cfg, self.cfg.sim.control_dt)
            perturb_ball_velocity(self.world.step_count, keys, self.world.ball_vel,
                                  self.cfg, self.cfg.sim.control_dt)
            perturb_gravity(self.world.step_count, keys, self.world.gravity,
                            self.cfg, self.cfg.sim.control_dt,
                            active=self.mode == "recovery")

        self._update_ball_estimate(keys)
        gravity_body = self.world.gravity_body()
        yaw_global = self.world.yaw_global()
        self.history.push(self.observation_row(gravity_body, yaw_global))

        breakdown = self.compute_reward(gravity_body, yaw_global)
        timeout = self.world.step_count >= self.horizon
        failed = np.zeros(self.n, dtype=bool)
        if (self.terminate_on_fall and self.mode == "dribble"):
            roll, pitch = quat_roll_pitch(self.world.base_quat)
            tilt = np.maximum(np.abs(roll), np.abs(pitch))
            failed = (tilt > self.cfg.runtime.fall_tilt_rad) | (
                self.world.base_pos[:, 2] < self.cfg.runtime.min_base_height
            )
        dones = timeout | failed
        info = {"timeout": timeout & ~failed}
        if np.any(dones):
            info["terminal_observation"] = self.policy_observation()[dones]
            rows = np.nonzero(dones)[0]
            self.episode[rows] += 1
            self.reset_lanes(rows)
        return breakdown, dones, info

    # ------------------------------------------------------------ observation
    def _true_ball_body(self) -> np.ndarray:
        return self.world.ball_pos_body()

    def _update_ball_estimate(self, keys: np.ndarray) -> None:
        """Zero-order hold driven by the Poisson camera arrival process."""
        due = self.world.time >= self.camera_next_arrival
        if not np.any(due):
            return
        rows = np.nonzero(due)[0]
        if self.cfg.runtime.vision_mode == "synthetic_fisheye":
            truth = self._true_ball_body()
            for i in rows:
                est = self._synthetic_estimate(int(i), truth[i])
                if est is not None:
                    self.ball_estimate[i] = est
        else:
            noisy = corrupt_ball_observation(
                keys[rows], self.world.step_count[rows], self._true_ball_body()[rows],
                self.cfg.noise.ball_obs_halfwidth,
            )
            self.ball_estimate[rows] = noisy
        inter = sample_camera_delay(
            keys[rows], self.camera_arrival_index[rows],
            self.dyn.camera_mean_arrival[rows],
        )
        self.camera_next_arrival[rows] = self.world.time[rows] + inter
        self.camera_arrival_index[rows] += 1

    def _synthetic_estimate(self, lane: int, ball_body: np.ndarray):
        key = int(self.episode_keys(np.array([lane]))[0])
        step = int(self.world.step_count[lane])
        drop = (
            float(self.dyn.frame_drop_prob[lane])
            if self.cfg.noise.use_frame_drop else 0.0
        )
        dets = {}
        for name, cam in self.cameras.items():
            dets[name] = synth_detect(ball_body, cam, self.cfg.vision, key, step,
                                      self.cfg.ball.radius, drop_prob=drop)
        best = fuse_detections(dets["front"], dets["bottom"])
        if best is None:
            return None
        cam = self.cameras[best.camera]
        try:
            est = detection_to_ball_position(best, cam.intr, cam, self.cfg.ball.radius)
        except ValueError:
            return None
        return est.position

    def observation_row(self, gravity_body: np.ndarray | None = None,
                        yaw_global: np.ndarray | None = None) -> np.ndarray:
        theta, _ = advance_gait_phase(self.world.time, self.cfg.gait)
        if gravity_body is None:
            gravity_body = self.world.gravity_body()
        if yaw_global is None:
            yaw_global = self.world.yaw_global()
        return build_observation(
            self.command, self.ball_estimate, self.world.q, self.world.qd,
            gravity_body, yaw_global, theta,
        )

    def observation(self) -> np.ndarray:
        """Flattened 37x15 observation stack (N, 555)."""
        return self.history.flat()

    def policy_observation(self) -> np.ndarray:
        """Scaled observation stack as fed to the networks."""
        return (self.observation() * self._obs_scale).astype(np.float32)

    def estimator_targets(self) -> np.ndarray:
        """Ground truth the state estimator regresses: body-frame base
        velocity, global-frame ball velocity, drag coefficient."""
        body_vel = quat_rotate_inverse(self.world.base_quat, self.world.base_lin_vel)
        ball_vel = world_to_global_2d(self.world.ball_vel[:, :2], self.world.yaw0)
        return np.concatenate(
            [body_vel, ball_vel, self.world.drag_coeff[:, None]], axis=1
        ).astype(np.float32)

    # ----------------------------------------------------------------- reward
    def compute_reward(self, gravity_body: np.ndarray | None = None,
                       yaw_global: np.ndarray | None = None):
        w = self.world
        if gravity_body is None:
            gravity_body = w.gravity_body()
        if yaw_global is None:
            yaw_global = w.yaw_global()
        if self.mode == "recovery":
            ground_b = w.ground_height(w.base_pos[:, None, :2])[:, 0]
            ground_f = w.ground_height(w.foot_pos_world[..., :2])
            clearance = np.maximum(
                w.foot_pos_world[..., 2] - self.cfg.robot.foot_radius - ground_f, 0.0
            )
            ctx = RecoveryContext(
                gravity_body=gravity_body,
                body_height=w.base_pos[:, 2] - ground_b,
                q=w.q,
                foot_heights=clearance,
                tau=w.tau,
                action=self.action,
            )
            return recovery_reward(
                ctx, self.cfg.reward, self.cfg.robot.stand_height(),
                self.cfg.robot.stand_q(),
            )

        _, phases = advance_gait_phase(w.time, self.cfg.gait)
        kappa = desired_contact(phases, self.cfg.gait)
        rel = w.ball_pos - w.base_pos
        robot_ball_angle = wrap_angle(np.arctan2(rel[:, 1], rel[:, 0]) - w.yaw0)
        ctx = DribbleContext(
            ball_vel=world_to_global_2d(w.ball_vel[:, :2], w.yaw0),
            command=self.command,
            ball_body=self._true_ball_body(),
            hip_fr=self.cfg.robot.hip_positions()[0],
            robot_ball_angle=robot_ball_angle,
            yaw_global=yaw_global,
            kappa=kappa,
            foot_forces=w.foot_force,
            foot_vel_xy=w.foot_vel_world[..., :2],
            q=w.q,
            qd=w.qd,
            qdd=w.qdd,
            tau=w.tau,
            gravity_body=gravity_body,
            action=self.action,
            action_prev=self.action_prev,
            action_prev2=self.action_prev2,
            q_lo=w.q_lo,
            q_hi=w.q_hi,
            hip_thigh_collision=w.hip_thigh_collision,
        )
        return dribble_reward(ctx, self.cfg.reward)

    # -------------------------------------------------------------- serialize
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"world.{k}": v for k, v in self.world.state_dict().items()}
        out.update(
            episode=self.episode.copy(),
            command=self.command.copy(),
            action=self.action.copy(),
            action_prev=self.action_prev.copy(),
            action_prev2=self.action_prev2.copy(),
            history=self.history.buf.copy(),
            ball_estimate=self.ball_estimate.copy(),
            camera_next_arrival=self.camera_next_arrival.copy(),
            camera_arrival_index=self.camera_arrival_index.copy(),
        )
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.world.load_state_dict(
            {k.split(".", 1)[1]: v for k, v in state.items() if k.startswith("world.")}
        )
        self.episode[...] = state["episode"]
        self.command[...] = state["command"]
        self.action[...] = state["action"]
        self.action_prev[...] = state["action_prev"]
        self.action_prev2[...] = state["action_prev2"]
        self.history.buf[...] = state["history"]
        self.ball_estimate[...] = state["ball_estimate"]
        self.camera_next_arrival[...] = state["camera_next_arrival"]
        self.camera_arrival_index[...] = state["camera_arrival_index"]
        # episode dynamics are a pure function of (seed, lane, episode)
        self._refresh_key_cache()
        self.dyn = sample_episode_dynamics(self._key_cache, self.mode, self.cfg.ranges)


def _merge_dynamics(old: EpisodeDynamics, new: EpisodeDynamics,
                    idx: np.ndarray) -> EpisodeDynamics:
    from dataclasses import fields, replace

    updates = {}
    for f in fields(EpisodeDynamics):
        ov = getattr(old, f.name)
        nv = getattr(new, f.name)
        if isinstance(ov, np.ndarray):
            merged = ov.copy()
            merged[idx] = nv
            updates[f.name] = merged
        else:
            updates[f.name] = ov
    return replace(old, **updates)
