"""Reduced-order physics for a batch of quadruped+ball environments.

Model: the trunk is a single 6-DOF rigid body; the four legs are massless
3-DOF kinematic chains whose feet exert penalty ground forces mapped onto the
trunk as a wrench; each joint integrates decoupled second-order dynamics with
a reflected inertia.  The ball is a sphere with penalty ground contact and a
quadratic rolling-drag force while in contact.  Ball-robot interaction is
impulsive (feet and trunk box vs sphere).

All state lives in (N, ...) arrays so the whole batch advances with
vectorized numpy ops; lanes are mutually independent, which makes results
invariant to how the batch is sharded across workers.  Rare contact paths
(trunk corners, ball-vs-trunk) are proximity-gated and computed on lane
subsets only.
"""

from __future__ import annotations

import numpy as np

from ..config import Config
from ..simmath import (
    cross3,
    quat_from_euler,
    quat_from_rotvec,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_rotate_inverse,
    quat_yaw,
    wrap_angle,
)
from .. import rng as crng
from .kinematics import all_feet_body, chain_points_body

GRAVITY = 9.81


class NonFiniteState(RuntimeError):
    """A NaN/inf appeared during integration."""

    def __init__(self, quantity: str, env_index: int):
        self.quantity = quantity
        self.env_index = env_index
        super().__init__(f"non-finite {quantity} in env {env_index}")


class EmptyFallBank(RuntimeError):
    """Recovery reset requested before any fall configurations exist."""


def rotmat(q: np.ndarray) -> np.ndarray:
    """Body-to-world rotation matrices (N, 3, 3) from quaternions (N, 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v * v).sum(axis=-1))


def ball_ground_forces(vel: np.ndarray, depth: np.ndarray, drag_coeff: np.ndarray,
                       mass: np.ndarray, cfg: Config) -> np.ndarray:
    """Instantaneous force on the ball: gravity always, plus ground normal and
    quadratic drag while in contact (depth > 0).  vel is (..., 3)."""
    vel = np.asarray(vel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    contact = depth > 0.0
    normal = np.where(
        contact,
        np.maximum(
            cfg.sim.ball_ground_stiffness * depth
            - cfg.sim.ball_ground_damping * vel[..., 2],
            0.0,
        ),
        0.0,
    )
    v_xy = vel[..., :2]
    speed = _norm(v_xy)
    safe = np.maximum(speed, 1e-12)
    drag_mag = np.where(contact, np.asarray(drag_coeff) * speed**2, 0.0)
    force = np.zeros(vel.shape, dtype=np.float64)
    force[..., 0] = -drag_mag * v_xy[..., 0] / safe
    force[..., 1] = -drag_mag * v_xy[..., 1] / safe
    force[..., 2] = normal - np.asarray(mass) * GRAVITY
    return force


def terrain_height(keys: np.ndarray, magnitude: np.ndarray, xy: np.ndarray,
                   cell: float = 0.35) -> np.ndarray:
    """Deterministic gradient-noise heightfield in [0, magnitude].

    keys is (N,), magnitude (N,), xy (N, K, 2); returns (N, K).
    """
    if not np.any(magnitude > 0.0):
        return np.zeros(xy.shape[:-1])
    g = xy / cell
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    kx = i0[..., 0].astype(np.uint64)
    ky = i0[..., 1].astype(np.uint64)
    k = np.asarray(keys, dtype=np.uint64)[:, None]
    total = np.zeros(xy.shape[:-1])
    u = f * f * f * (f * (f * 6.0 - 15.0) + 10.0)
    weights = {
        (0, 0): (1 - u[..., 0]) * (1 - u[..., 1]),
        (1, 0): u[..., 0] * (1 - u[..., 1]),
        (0, 1): (1 - u[..., 0]) * u[..., 1],
        (1, 1): u[..., 0] * u[..., 1],
    }
    for (di, dj), w in weights.items():
        h = crng.keyed_uniform(k, kx + np.uint64(di), ky + np.uint64(dj), crng.CH_TERRAIN)
        ang = 2.0 * np.pi * h
        gx, gy = np.cos(ang), np.sin(ang)
        dx, dy = f[..., 0] - di, f[..., 1] - dj
        total += w * (gx * dx + gy * dy)
    norm = total / 0.7071  # unit-gradient 2D noise spans about +-sqrt(2)/2
    return (0.5 * norm + 0.5) * np.asarray(magnitude)[:, None]


class VecWorld:
    """A batch of N independent environment instances stepped together."""

    def __init__(self, n: int, cfg: Config, mode: str = "dribble"):
        assert mode in ("dribble", "recovery")
        self.n = n
        self.cfg = cfg
        self.mode = mode
        r = cfg.robot
        self.q_lo, self.q_hi = r.joint_limits()
        self.inertia_diag = np.array(r.base_inertia)
        self._corners_body = self._make_corners(r.base_box_half_extents)
        self._box_reach = float(np.linalg.norm(r.base_box_half_extents))
        self._leg_reach = r.link_hip + r.link_thigh + r.link_calf + 0.1

        z3 = lambda: np.zeros((n, 3))
        self.base_pos = z3()
        self.base_quat = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        self.base_lin_vel = z3()
        self.base_ang_vel = z3()
        self.q = np.tile(r.stand_q(), (n, 1))
        self.qd = np.zeros((n, 12))
        self.qdd = np.zeros((n, 12))
        self.tau = np.zeros((n, 12))
        self.ball_pos = z3()
        self.ball_pos[:, 0] = 1.0
        self.ball_pos[:, 2] = cfg.ball.radius
        self.ball_vel = z3()
        self.foot_contact = np.zeros((n, 4), dtype=bool)
        self.foot_force = np.zeros((n, 4, 3))
        self.foot_pos_world = np.zeros((n, 4, 3))
        self.foot_vel_world = np.zeros((n, 4, 3))
        self.gravity = np.tile([0.0, 0.0, -GRAVITY], (n, 1))
        self.yaw0 = np.zeros(n)
        self.time = np.zeros(n)
        self.step_count = np.zeros(n, dtype=np.int64)
        self.prev_q_des = np.tile(r.stand_q(), (n, 1))
        self.hip_thigh_collision = np.zeros(n, dtype=bool)
        self.terrain_keys = np.zeros(n, dtype=np.uint64)

        # episode dynamics, nominal until a sampler overwrites them
        self.total_mass = np.full(n, r.base_mass)
        self.com_offset = z3()
        self.motor_strength = np.ones((n, 12))
        self.joint_calib = np.zeros((n, 12))
        self.friction = np.full(n, cfg.sim.default_friction)
        self.restitution = np.full(n, cfg.sim.default_restitution)
        self.ball_mass = np.full(n, cfg.ball.nominal_mass)
        self.drag_coeff = np.full(n, 0.5)
        self.actuator_lag_tau = np.zeros(n)
        self.action_delay = np.zeros(n, dtype=np.int64)
        self.terrain_magnitude = np.zeros(n)

        # diagnostics for the impulse-symmetry property
        self.last_ball_impulse = z3()
        self.last_base_impulse = z3()

        self._refresh_feet()
        self.foot_vel_world[:] = 0.0

    @staticmethod
    def _make_corners(half: tuple[float, float, float]) -> np.ndarray:
        hx, hy, hz = half
        return np.array(
            [[sx * hx, sy * hy, sz * hz]
             for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        )

    # ------------------------------------------------------------------ state
    @property
    def _flat(self) -> bool:
        return not bool(np.any(self.terrain_magnitude > 0.0))

    def _refresh_feet(self) -> None:
        feet_body = all_feet_body(self.q, self.cfg.robot)
        R = rotmat(self.base_quat)
        self.foot_pos_world = self.base_pos[:, None, :] + np.einsum(
            "nij,nkj->nki", R, feet_body
        )

    def ground_height(self, xy: np.ndarray) -> np.ndarray:
        """Terrain height at (N, K, 2) world points."""
        return terrain_height(self.terrain_keys, self.terrain_magnitude, xy)

    def gravity_body(self) -> np.ndarray:
        down = np.tile([0.0, 0.0, -1.0], (self.n, 1))
        return quat_rotate_inverse(self.base_quat, down)

    def yaw_global(self) -> np.ndarray:
        return wrap_angle(quat_yaw(self.base_quat) - self.yaw0)

    def ball_pos_body(self) -> np.ndarray:
        return quat_rotate_inverse(self.base_quat, self.ball_pos - self.base_pos)

    # ------------------------------------------------------------------ reset
    def reset_dribble(self, episode_keys: np.ndarray, idx: np.ndarray | None = None) -> None:
        """Random yaw, legs jittered around the stand pose, ball within 2 m."""
        idx = np.arange(self.n) if idx is None else np.asarray(idx)
        keys = np.asarray(episode_keys, dtype=np.uint64)
        u = crng.keyed_uniform(keys, crng.CH_RESET, lanes=17)

        yaw = (u[:, 0] * 2.0 - 1.0) * np.pi
        self.base_quat[idx] = quat_from_euler(0.0, 0.0, yaw)
        self.yaw0[idx] = yaw
        q = self.cfg.robot.stand_q() + (u[:, 1:13] * 2.0 - 1.0) * 0.2
        self.q[idx] = np.clip(q, self.q_lo, self.q_hi)
        self._common_reset(idx, keys)

        feet_body = all_feet_body(self.q[idx], self.cfg.robot)
        feet_rot = quat_rotate(self.base_quat[idx][:, None, :], feet_body)
        weight_pen = self.total_mass[idx] * GRAVITY / (4.0 * self.cfg.sim.ground_stiffness)
        base_z = np.max(self.cfg.robot.foot_radius - feet_rot[..., 2], axis=1) - weight_pen
        self.base_pos[idx] = 0.0
        self.base_pos[idx, 2] = base_z

        dist = np.maximum(2.0 * np.sqrt(u[:, 13]), 0.3)
        ang = u[:, 14] * 2.0 * np.pi
        self.ball_pos[idx, 0] = dist * np.cos(ang)
        self.ball_pos[idx, 1] = dist * np.sin(ang)
        self.ball_pos[idx, 2] = self.cfg.ball.radius
        self.ball_vel[idx] = 0.0
        self._post_reset(idx)

    def reset_recovery(self, episode_keys: np.ndarray, fall_bank: dict[str, np.ndarray],
                       idx: np.ndarray | None = None) -> None:
        """Draw initial states from a pre-generated bank of settled falls."""
        if not fall_bank or fall_bank.get("q") is None or len(fall_bank["q"]) == 0:
            raise EmptyFallBank("generate a fall bank before recovery resets")
        idx = np.arange(self.n) if idx is None else np.asarray(idx)
        keys = np.asarray(episode_keys, dtype=np.uint64)
        u = crng.keyed_uniform(keys, crng.CH_RESET)
        rows = (u * len(fall_bank["q"])).astype(np.int64)

        self.base_pos[idx] = fall_bank["base_pos"][rows]
        self.base_quat[idx] = fall_bank["base_quat"][rows]
        self.q[idx] = fall_bank["q"][rows]
        self._common_reset(idx, keys)
        self.base_lin_vel[idx] = fall_bank["base_lin_vel"][rows]
        self.base_ang_vel[idx] = fall_bank["base_ang_vel"][rows]
        self.qd[idx] = fall_bank["qd"][rows]
        self.yaw0[idx] = quat_yaw(self.base_quat[idx])
        self.ball_pos[idx] = [5.0, 5.0, self.cfg.ball.radius]
        self.ball_vel[idx] = 0.0
        self._post_reset(idx)

    def _common_reset(self, idx: np.ndarray, keys: np.ndarray) -> None:
        self.qd[idx] = 0.0
        self.qdd[idx] = 0.0
        self.tau[idx] = 0.0
        self.prev_q_des[idx] = self.q[idx]
        self.base_lin_vel[idx] = 0.0
        self.base_ang_vel[idx] = 0.0
        self.gravity[idx] = [0.0, 0.0, -GRAVITY]
        self.time[idx] = 0.0
        self.step_count[idx] = 0
        self.terrain_keys[idx] = keys

    def _post_reset(self, idx: np.ndarray) -> None:
        feet_body = all_feet_body(self.q[idx], self.cfg.robot)
        R = rotmat(self.base_quat[idx])
        self.foot_pos_world[idx] = self.base_pos[idx][:, None, :] + np.einsum(
            "nij,nkj->nki", R, feet_body
        )
        self.foot_vel_world[idx] = 0.0
        self.foot_force[idx] = 0.0
        self.foot_contact[idx] = False
        self.hip_thigh_collision[idx] = False
        self.last_ball_impulse[idx] = 0.0
        self.last_base_impulse[idx] = 0.0

    # ------------------------------------------------------------------- step
    def step(self, q_des: np.ndarray, shard: slice | None = None) -> None:
        """Advance one 20 ms control step (all substeps) for a lane range."""
        s = shard if shard is not None else slice(0, self.n)
        q_des = np.clip(q_des, self.q_lo, self.q_hi)
        dt = self.cfg.sim.physics_dt
        self.last_ball_impulse[s] = 0.0
        self.last_base_impulse[s] = 0.0
        for sub in range(self.cfg.sim.substeps_per_control):
            use_new = sub >= self.action_delay[s]
            a_eff = np.where(use_new[:, None], q_des, self.prev_q_des[s])
            self._substep(s, a_eff, dt)
        self.prev_q_des[s] = q_des
        self.step_count[s] += 1
        self.time[s] = self.step_count[s] * self.cfg.sim.control_dt
        self._update_hip_thigh_collision(s)
        self._check_finite(s)

    def compute_joint_torques(self, s: slice, q_des_eff: np.ndarray, dt: float) -> np.ndarray:
        r = self.cfg.robot
        pd = r.kp * (q_des_eff + self.joint_calib[s] - self.q[s]) - r.kd * self.qd[s]
        pd = np.clip(self.motor_strength[s] * pd, -r.torque_limit, r.torque_limit)
        lag = self.actuator_lag_tau[s][:, None]
        alpha = np.where(lag > 0.0, dt / (lag + dt), 1.0)
        self.tau[s] += alpha * (pd - self.tau[s])
        return self.tau[s]

    def _substep(self, s: slice, q_des_eff: np.ndarray, dt: float) -> None:
        cfg = self.cfg
        r = cfg.robot

        tau = self.compute_joint_torques(s, q_des_eff, dt)
        self.qdd[s] = tau / r.reflected_inertia
        self.qd[s] = np.clip(self.qd[s] + self.qdd[s] * dt, -r.max_joint_speed, r.max_joint_speed)
        self.q[s] += self.qd[s] * dt

        quat = self.base_quat[s]
        pos = self.base_pos[s]
        R = rotmat(quat)
        feet_body = all_feet_body(self.q[s], r)
        feet_world = pos[:, None, :] + np.einsum("nij,nkj->nki", R, feet_body)
        foot_vel = (feet_world - self.foot_pos_world[s]) / dt
        self.foot_pos_world[s] = feet_world
        self.foot_vel_world[s] = foot_vel

        if self._flat:
            h_feet = 0.0
            h_ball = 0.0
        else:
            query = np.concatenate(
                [feet_world[..., :2], self.ball_pos[s][:, None, :2]], axis=1
            )
            heights = self.ground_height(query)
            h_feet, h_ball = heights[:, :4], heights[:, 4]

        grav_f = self.total_mass[s][:, None] * self.gravity[s]
        force = grav_f.copy()
        torque = cross3(np.einsum("nij,nj->ni", R, self.com_offset[s]), grav_f)

        f_feet = self._penalty_forces(
            feet_world, foot_vel, h_feet + r.foot_radius, self.friction[s],
            self.restitution[s],
        )
        self.foot_force[s] = f_feet
        self.foot_contact[s] = f_feet[..., 2] > 0.0
        force += f_feet.sum(axis=1)
        torque += cross3(feet_world - pos[:, None, :], f_feet).sum(axis=1)

        # trunk corner contacts only when the box can plausibly reach ground
        margin = self._box_reach + (0.0 if self._flat else self.terrain_magnitude[s].max())
        near = pos[:, 2] < margin + 0.02
        if np.any(near):
            rows = np.nonzero(near)[0]
            corners = pos[rows, None, :] + np.einsum(
                "nij,kj->nki", R[rows], self._corners_body
            )
            rel_c = corners - pos[rows, None, :]
            corner_vel = self.base_lin_vel[s][rows, None, :] + cross3(
                self.base_ang_vel[s][rows, None, :], rel_c
            )
            if self._flat:
                h_c = 0.0
            else:
                h_c = terrain_height(
                    self.terrain_keys[s][rows], self.terrain_magnitude[s][rows],
                    corners[..., :2],
                )
            f_c = self._penalty_forces(
                corners, corner_vel, h_c, self.friction[s][rows],
                self.restitution[s][rows],
            )
            force[rows] += f_c.sum(axis=1)
            torque[rows] += cross3(rel_c, f_c).sum(axis=1)

        self._step_ball(s, h_ball, dt)
        self._ball_robot_impulses(s, R, feet_world, foot_vel)

        m = self.total_mass[s][:, None]
        self.base_lin_vel[s] += force / m * dt
        omega_b = np.einsum("nji,nj->ni", R, self.base_ang_vel[s])
        torque_b = np.einsum("nji,nj->ni", R, torque)
        gyro = cross3(omega_b, self.inertia_diag * omega_b)
        omega_b += (torque_b - gyro) / self.inertia_diag * dt
        self.base_ang_vel[s] = np.einsum("nij,nj->ni", R, omega_b)
        self.base_pos[s] += self.base_lin_vel[s] * dt
        dq = quat_from_rotvec(self.base_ang_vel[s] * dt)
        self.base_quat[s] = quat_normalize(quat_mul(dq, quat))

    def _penalty_forces(self, points: np.ndarray, vels: np.ndarray, ground,
                        friction: np.ndarray, restitution: np.ndarray) -> np.ndarray:
        """Spring-damper normal force with a velocity-capped Coulomb tangent.

        Damping scales with depth so grazing contacts cannot spike.  points
        and vels are (N, K, 3); returns world-frame forces (N, K, 3).
        """
        sim = self.cfg.sim
        depth = np.maximum(ground - points[..., 2], 0.0)
        damping = sim.ground_damping * (1.0 - restitution[:, None]) * depth
        normal = np.clip(
            sim.ground_stiffness * depth - damping * vels[..., 2],
            0.0, sim.ground_force_cap,
        )
        v_t = vels[..., :2]
        v_t_mag = np.sqrt(v_t[..., 0] ** 2 + v_t[..., 1] ** 2)
        safe = np.maximum(v_t_mag, 1e-9)
        f_t_mag = np.minimum(friction[:, None] * normal, sim.ground_tangent_gain * v_t_mag)
        out = np.empty(points.shape)
        out[..., 0] = -f_t_mag * v_t[..., 0] / safe
        out[..., 1] = -f_t_mag * v_t[..., 1] / safe
        out[..., 2] = normal
        return out

    def _step_ball(self, s: slice, ground_h, dt: float) -> None:
        cfg = self.cfg
        m = self.ball_mass[s]
        vel = self.ball_vel[s]
        depth = ground_h + cfg.ball.radius - self.ball_pos[s][:, 2]
        contact = depth > 0.0
        normal = np.where(
            contact,
            np.maximum(
                cfg.sim.ball_ground_stiffness * depth
                - cfg.sim.ball_ground_damping * vel[:, 2],
                0.0,
            ),
            0.0,
        )
        vel[:, 2] += (normal / m + self.gravity[s][:, 2]) * dt
        vel[:, :2] += self.gravity[s][:, :2] * dt
        # quadratic drag integrated with its exact per-substep map, which is
        # unconditionally stable and matches the closed-form decay
        speed = np.sqrt(vel[:, 0] ** 2 + vel[:, 1] ** 2)
        k = np.where(contact, self.drag_coeff[s] / m, 0.0)
        vel[:, :2] /= (1.0 + k * speed * dt)[:, None]
        self.ball_pos[s] += vel * dt

    def _ball_robot_impulses(self, s: slice, R: np.ndarray, feet_world: np.ndarray,
                             foot_vel: np.ndarray) -> None:
        cfg = self.cfg
        ball_r = cfg.ball.radius
        rel_ball = self.ball_pos[s] - self.base_pos[s]
        reach = max(self._leg_reach, self._box_reach) + ball_r + 0.05
        near = (rel_ball * rel_ball).sum(axis=1) < reach * reach
        if not np.any(near):
            return
        rows = np.nonzero(near)[0]
        m_ball = self.ball_mass[s][rows]
        rest = self.restitution[s][rows]
        fric = self.friction[s][rows]

        # feet: small spheres moving at their kinematic velocity
        delta = self.ball_pos[s][rows, None, :] - feet_world[rows]
        dist = _norm(delta)
        overlap = (ball_r + cfg.robot.foot_radius) - dist
        hit = overlap > 0.0
        if np.any(hit):
            n = delta / np.maximum(dist, 1e-9)[..., None]
            v_rel = self.ball_vel[s][rows, None, :] - foot_vel[rows]
            vn = (v_rel * n).sum(axis=-1)
            active = hit & (vn < 0.0)
            if np.any(active):
                m_red = 1.0 / (1.0 / m_ball[:, None] + 1.0 / cfg.robot.foot_effective_mass)
                jn = np.where(active, -(1.0 + rest[:, None]) * vn * m_red, 0.0)
                v_t = v_rel - vn[..., None] * n
                v_t_mag = _norm(v_t)
                jt_mag = np.minimum(fric[:, None] * jn, m_red * v_t_mag)
                t_hat = v_t / np.maximum(v_t_mag, 1e-9)[..., None]
                imp = jn[..., None] * n - jt_mag[..., None] * t_hat
                total = imp.sum(axis=1)
                self.ball_vel[s][rows] += total / m_ball[:, None]
                self._apply_base_impulse(s, rows, -imp, feet_world[rows])
                self.last_ball_impulse[s][rows] += total
            push = np.where(hit, overlap, 0.0)
            self.ball_pos[s][rows] += (
                push[..., None] * delta / np.maximum(dist, 1e-9)[..., None]
            ).sum(axis=1)

        # trunk collision box
        ball_body = np.einsum("nji,nj->ni", R[rows], rel_ball[rows])
        half = np.array(cfg.robot.base_box_half_extents)
        closest = np.clip(ball_body, -half, half)
        d_body = ball_body - closest
        dist_b = _norm(d_body)
        inside = dist_b < 1e-9
        if np.any(inside):
            # center inside the box: exit along the axis of least separation
            gap = half - np.abs(ball_body)
            axis = np.argmin(gap, axis=-1)
            d_body = np.where(
                inside[:, None],
                np.eye(3)[axis] * np.sign(ball_body + 1e-12),
                d_body,
            )
            dist_b = np.where(inside, 0.0, dist_b)
        overlap_b = ball_r - dist_b
        hit_b = overlap_b > 0.0
        if np.any(hit_b):
            n_body = d_body / np.maximum(_norm(d_body), 1e-9)[:, None]
            n_world = np.einsum("nij,nj->ni", R[rows], n_body)
            contact_world = self.base_pos[s][rows] + np.einsum(
                "nij,nj->ni", R[rows], closest
            )
            rel = contact_world - self.base_pos[s][rows]
            v_point = self.base_lin_vel[s][rows] + cross3(self.base_ang_vel[s][rows], rel)
            v_rel = self.ball_vel[s][rows] - v_point
            vn = (v_rel * n_world).sum(axis=-1)
            active = hit_b & (vn < 0.0)
            m_red = 1.0 / (1.0 / m_ball + 1.0 / self.total_mass[s][rows])
            jn = np.where(active, -(1.0 + rest) * vn * m_red, 0.0)
            v_t = v_rel - vn[:, None] * n_world
            v_t_mag = _norm(v_t)
            jt_mag = np.minimum(fric * jn, m_red * v_t_mag)
            t_hat = v_t / np.maximum(v_t_mag, 1e-9)[:, None]
            imp = jn[:, None] * n_world - jt_mag[:, None] * t_hat
            self.ball_vel[s][rows] += imp / m_ball[:, None]
            self._apply_base_impulse(s, rows, -imp[:, None, :], contact_world[:, None, :])
            self.last_ball_impulse[s][rows] += imp
            self.ball_pos[s][rows] += np.where(hit_b, overlap_b, 0.0)[:, None] * n_world

    def _apply_base_impulse(self, s: slice, rows: np.ndarray, impulses: np.ndarray,
                            points: np.ndarray) -> None:
        """Apply (M, K, 3) impulses at world points to the trunk, rows-of-s."""
        total = impulses.sum(axis=1)
        self.base_lin_vel[s][rows] += total / self.total_mass[s][rows][:, None]
        rel = points - self.base_pos[s][rows][:, None, :]
        ang_imp = cross3(rel, impulses).sum(axis=1)
        quat = self.base_quat[s][rows]
        l_body = quat_rotate_inverse(quat, ang_imp)
        self.base_ang_vel[s][rows] += quat_rotate(quat, l_body / self.inertia_diag)
        self.last_base_impulse[s][rows] += total

    def _update_hip_thigh_collision(self, s: slice) -> None:
        # cheap cull: with the base high enough no chain point can be underground
        bound = self.cfg.robot.link_hip + 0.5 * self.cfg.robot.link_thigh + 0.02
        if not self._flat:
            bound = bound + self.terrain_magnitude[s].max()
        maybe = self.base_pos[s][:, 2] < bound
        self.hip_thigh_collision[s] = False
        if not np.any(maybe):
            return
        rows = np.nonzero(maybe)[0]
        pts = chain_points_body(self.q[s][rows], self.cfg.robot)
        R = rotmat(self.base_quat[s][rows])
        pos = self.base_pos[s][rows]
        hip_world = pos[:, None, :] + np.einsum("nij,nkj->nki", R, pts["hip"])
        thigh_world = pos[:, None, :] + np.einsum("nij,nkj->nki", R, pts["thigh_mid"])
        zs = np.concatenate([hip_world[..., 2], thigh_world[..., 2]], axis=1)
        if self._flat:
            h = 0.0
        else:
            query = np.concatenate([hip_world[..., :2], thigh_world[..., :2]], axis=1)
            h = terrain_height(
                self.terrain_keys[s][rows], self.terrain_magnitude[s][rows], query
            )
        self.hip_thigh_collision[s][rows] = (zs < h).any(axis=1)

    def _check_finite(self, s: slice) -> None:
        for name in ("base_pos", "base_quat", "base_lin_vel", "base_ang_vel",
                     "q", "qd", "ball_pos", "ball_vel"):
            arr = getattr(self, name)[s]
            if np.isfinite(arr).all():
                continue
            bad = ~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
            env = int(np.nonzero(bad)[0][0]) + (s.start or 0)
            raise NonFiniteState(name, env)

    # -------------------------------------------------------------- serialize
    STATE_FIELDS = (
        "base_pos", "base_quat", "base_lin_vel", "base_ang_vel", "q", "qd",
        "qdd", "tau", "ball_pos", "ball_vel", "foot_pos_world", "foot_vel_world",
        "foot_force", "gravity", "yaw0", "time", "step_count", "prev_q_des",
        "terrain_keys", "total_mass", "com_offset", "motor_strength",
        "joint_calib", "friction", "restitution", "ball_mass", "drag_coeff",
        "actuator_lag_tau", "action_delay", "terrain_magnitude",
    )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).copy() for k in self.STATE_FIELDS}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.STATE_FIELDS:
            getattr(self, k)[...] = state[k]
        self.foot_contact = self.foot_force[..., 2] > 0.0
