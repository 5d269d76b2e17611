"""PPO with a concurrently trained state estimator.

Rollouts are collected synchronously over all lanes, advantages come from
recursive GAE (timeout resets bootstrap the terminal value rather than
zeroing it), and updates run a fixed epochs x minibatches schedule with Adam.
Everything is deterministic given the run seed: action noise and minibatch
shuffles come from the counter RNG, and environment stepping is shard
invariant.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as crng
from .config import Config
from .env import ESTIMATOR_DIM, DribbleEnv
from .nn import Adam, DenseNet, GaussianPolicyHead, load_checkpoint, save_checkpoint
from .runtime import DRIBBLE_OBS_WIDTH, RECOVERY_OBS_WIDTH

ACTION_DIM = 12


class NonFiniteLoss(RuntimeError):
    def __init__(self, which: str, dump_path: str | None):
        self.dump_path = dump_path
        super().__init__(f"non-finite {which} loss"
                         + (f"; minibatch dumped to {dump_path}" if dump_path else ""))


class ActorCritic:
    """Policy, critic, and (for dribbling) the state estimator whose
    predictions augment the policy/critic input."""

    def __init__(self, cfg: Config, mode: str = "dribble", init_key: int = 0):
        p = cfg.ppo
        width = DRIBBLE_OBS_WIDTH if mode == "dribble" else RECOVERY_OBS_WIDTH
        self.obs_dim = width * cfg.runtime.history_len
        self.mode = mode
        self.with_estimator = mode == "dribble"
        est_dim = ESTIMATOR_DIM if self.with_estimator else 0
        in_dim = self.obs_dim + est_dim
        hid = list(p.policy_hidden)
        self.policy = DenseNet([in_dim, *hid, ACTION_DIM], init_key=init_key * 3 + 1)
        self.critic = DenseNet([in_dim, *hid, 1], init_key=init_key * 3 + 2, out_gain=1.0)
        self.estimator = (
            DenseNet([self.obs_dim, *p.estimator_hidden, ESTIMATOR_DIM],
                     init_key=init_key * 3 + 3)
            if self.with_estimator else None
        )
        self.head = GaussianPolicyHead(ACTION_DIM, init_log_std=p.init_log_std)
        self.last_estimate: np.ndarray | None = None

    def estimate(self, obs: np.ndarray) -> np.ndarray:
        if not self.with_estimator:
            return np.zeros((obs.shape[0], 0), dtype=np.float32)
        pred = self.estimator.forward(obs)
        self.last_estimate = pred
        return pred

    def policy_input(self, obs: np.ndarray, est: np.ndarray | None = None) -> np.ndarray:
        if not self.with_estimator:
            return np.asarray(obs, dtype=np.float32)
        if est is None:
            est = self.estimate(obs)
        return np.concatenate([obs, est], axis=1, dtype=np.float32)

    def act_deterministic(self, obs: np.ndarray) -> np.ndarray:
        return self.policy.forward(self.policy_input(obs))

    def value(self, obs: np.ndarray, est: np.ndarray | None = None) -> np.ndarray:
        return self.critic.forward(self.policy_input(obs, est))[:, 0]

    # --------------------------------------------------------------- persist
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = self.policy.state_arrays("policy")
        out.update(self.critic.state_arrays("critic"))
        if self.estimator is not None:
            out.update(self.estimator.state_arrays("estimator"))
        out["log_std"] = self.head.log_std
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.policy.load_state_arrays("policy", arrays)
        self.critic.load_state_arrays("critic", arrays)
        if self.estimator is not None:
            self.estimator.load_state_arrays("estimator", arrays)
        self.head.log_std[...] = arrays["log_std"]

    def save(self, path: str, cfg: Config) -> None:
        save_checkpoint(path, self.state_arrays(), {
            "mode": self.mode, "config_hash": cfg.config_hash(),
            "obs_dim": self.obs_dim,
        })

    @classmethod
    def load(cls, path: str, cfg: Config) -> "ActorCritic":
        arrays, meta = load_checkpoint(path)
        ac = cls(cfg, mode=meta.get("mode", "dribble"))
        ac.load_state_arrays(arrays)
        return ac


@dataclass
class RolloutBuffer:
    """Fixed-horizon batched trajectories, shape [T, N, ...]."""

    obs: np.ndarray
    est_pred: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    dones: np.ndarray
    est_targets: np.ndarray
    term_means: dict = field(default_factory=dict)

    @classmethod
    def allocate(cls, t: int, n: int, obs_dim: int, est_dim: int) -> "RolloutBuffer":
        return cls(
            obs=np.zeros((t, n, obs_dim), dtype=np.float32),
            est_pred=np.zeros((t, n, est_dim), dtype=np.float32),
            actions=np.zeros((t, n, ACTION_DIM), dtype=np.float32),
            log_probs=np.zeros((t, n), dtype=np.float64),
            values=np.zeros((t, n), dtype=np.float64),
            next_values=np.zeros((t, n), dtype=np.float64),
            rewards=np.zeros((t, n), dtype=np.float64),
            raw_rewards=np.zeros((t, n), dtype=np.float64),
            dones=np.zeros((t, n), dtype=bool),
            est_targets=np.zeros((t, n, ESTIMATOR_DIM), dtype=np.float32),
        )

    def assert_finite(self) -> None:
        for name in ("obs", "actions", "log_probs", "values", "rewards"):
            if not np.isfinite(getattr(self, name)).all():
                raise NonFiniteLoss(name, None)


class ReturnNormalizer:
    """Scales rewards by the running std of discounted-return estimates."""

    def __init__(self, n_envs: int, gamma: float, enabled: bool = True):
        self.gamma = gamma
        self.enabled = enabled
        self.ret = np.zeros(n_envs)
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return rewards
        self.ret = self.ret * self.gamma + rewards
        batch = self.ret
        n = batch.size
        b_mean = float(batch.mean())
        b_m2 = float(((batch - b_mean) ** 2).sum())
        delta = b_mean - self.mean
        tot = self.count + n
        self.mean += delta * n / tot
        self.m2 += b_m2 + delta * delta * self.count * n / tot
        self.count = tot
        var = self.m2 / max(self.count, 1.0)
        out = rewards if var < 1e-12 else rewards / np.sqrt(var + 1e-8)
        self.ret[dones] = 0.0
        return out

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.ret": self.ret,
            f"{prefix}.stats": np.array([self.count, self.mean, self.m2]),
        }

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.ret[...] = arrays[f"{prefix}.ret"]
        self.count, self.mean, self.m2 = arrays[f"{prefix}.stats"]


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient list so its global L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def compute_gae(rewards: np.ndarray, values: np.ndarray, next_values: np.ndarray,
                dones: np.ndarray, gamma: float, lam: float):
    """Recursive GAE.  Episode ends cut the eligibility trace; next_values
    already equals the pre-reset terminal value on done steps (timeouts
    bootstrap rather than zero)."""
    t_len = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    deltas = rewards + gamma * next_values - values
    gae = np.zeros(rewards.shape[1])
    for t in range(t_len - 1, -1, -1):
        gae = deltas[t] + gamma * lam * (~dones[t]) * gae
        advantages[t] = gae
    returns = advantages + values
    return advantages, returns


def collect_rollout(env: DribbleEnv, ac: ActorCritic, normalizer: ReturnNormalizer,
                    rng: crng.CounterRng, cfg: Config) -> RolloutBuffer:
    """steps_per_rollout synchronous steps over all lanes."""
    t_len = cfg.ppo.steps_per_rollout
    est_dim = ESTIMATOR_DIM if ac.with_estimator else 0
    buf = RolloutBuffer.allocate(t_len, env.n, ac.obs_dim, est_dim)
    term_sums: dict[str, float] = {}

    term_values = np.zeros((t_len, env.n))
    for t in range(t_len):
        obs = env.policy_observation()
        est = ac.estimate(obs) if ac.with_estimator else None
        pol_in = ac.policy_input(obs, est)
        mean = ac.policy.forward(pol_in)
        noise = rng.normal(size=(env.n, ACTION_DIM)).astype(np.float32)
        action, logp, _ = ac.head.sample(mean, noise)
        value = ac.critic.forward(pol_in)[:, 0]

        buf.obs[t] = obs
        if est is not None:
            buf.est_pred[t] = est
        buf.actions[t] = action
        buf.log_probs[t] = logp
        buf.values[t] = value
        buf.est_targets[t] = env.estimator_targets()

        breakdown, dones, info = env.step(action)
        buf.raw_rewards[t] = breakdown.total
        buf.rewards[t] = normalizer.update(np.asarray(breakdown.total, dtype=np.float64),
                                           dones)
        buf.dones[t] = dones
        if np.any(dones):
            # timeouts bootstrap the pre-reset value; failures terminate at 0
            term_obs = info["terminal_observation"]
            tv = ac.value(term_obs)
            tv = tv * info["timeout"][dones]
            term_values[t, dones] = tv
        for k, v in breakdown.scalar_means().items():
            term_sums[k] = term_sums.get(k, 0.0) + v

    final_value = ac.value(env.policy_observation())
    for t in range(t_len):
        nxt = buf.values[t + 1] if t + 1 < t_len else final_value
        buf.next_values[t] = np.where(buf.dones[t], term_values[t], nxt)

    buf.term_means = {k: v / t_len for k, v in term_sums.items()}
    buf.assert_finite()
    return buf


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    estimator_loss: float
    approx_kl: float
    clip_fraction: float


def ppo_update(buf: RolloutBuffer, ac: ActorCritic, adams: dict[str, Adam],
               rng: crng.CounterRng, cfg: Config,
               dump_dir: str | None = None) -> UpdateStats:
    p = cfg.ppo
    buf.assert_finite()
    t_len, n = buf.rewards.shape
    s = t_len * n

    advantages, returns = compute_gae(
        buf.rewards, buf.values, buf.next_values, buf.dones, p.gamma, p.gae_lambda
    )
    adv_flat = advantages.reshape(s)
    adv_norm = (adv_flat - adv_flat.mean()) / (adv_flat.std() + 1e-8)

    obs = buf.obs.reshape(s, -1)
    est_pred = buf.est_pred.reshape(s, -1)
    actions = buf.actions.reshape(s, ACTION_DIM)
    logp_old = buf.log_probs.reshape(s)
    returns_flat = returns.reshape(s).astype(np.float32)
    targets = buf.est_targets.reshape(s, ESTIMATOR_DIM)

    stats = np.zeros(6, dtype=np.float64)
    count = 0
    mb_size = s // p.minibatches
    for _ in range(p.epochs):
        perm = rng.permutation(s)
        for k in range(p.minibatches):
            mb = perm[k * mb_size:(k + 1) * mb_size]
            b = mb.size
            x = np.concatenate([obs[mb], est_pred[mb]], axis=1) \
                if ac.with_estimator else obs[mb]

            mean, cache_p = ac.policy.forward(x, cache=True)
            logp_new = ac.head.log_prob(mean, actions[mb])
            ratio = np.exp(np.clip(logp_new - logp_old[mb], -20.0, 20.0))
            adv = adv_norm[mb]
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - p.clip, 1.0 + p.clip) * adv
            surrogate = np.minimum(unclipped, clipped)
            policy_loss = -float(surrogate.mean(dtype=np.float64))

            # surrogate gradient flows only where the unclipped branch wins
            active = unclipped <= clipped
            g_logp = (-(ratio * adv * active) / b).astype(np.float32)
            d_mean, d_logstd = ac.head.log_prob_grads(mean, actions[mb])
            pol_grads, _ = ac.policy.backward(cache_p, g_logp[:, None] * d_mean)
            g_log_std = (g_logp[:, None] * d_logstd).sum(axis=0, dtype=np.float64)
            g_log_std -= p.entropy_coef  # d(-entropy)/d(log_std) = -1 per dim
            pol_grads = pol_grads + [g_log_std.astype(np.float32)]

            v, cache_v = ac.critic.forward(x, cache=True)
            v = v[:, 0]
            v_err = v - returns_flat[mb]
            value_loss = float((v_err ** 2).mean(dtype=np.float64))
            g_v = (p.value_coef * 2.0 * v_err / b).astype(np.float32)
            critic_grads, _ = ac.critic.backward(cache_v, g_v[:, None])

            est_loss = 0.0
            if ac.with_estimator:
                pred, cache_e = ac.estimator.forward(obs[mb], cache=True)
                e_err = pred - targets[mb]
                est_loss = float((e_err ** 2).mean(dtype=np.float64))
                g_e = (p.estimator_coef * 2.0 * e_err / e_err.size).astype(np.float32)
                est_grads, _ = ac.estimator.backward(cache_e, g_e)

            entropy = ac.head.entropy()
            losses = (policy_loss, value_loss, est_loss)
            if not all(np.isfinite(v) for v in losses):
                path = None
                if dump_dir is not None:
                    path = os.path.join(dump_dir, "bad_minibatch.bin")
                    from .io_container import save_arrays
                    save_arrays(path, {
                        "obs": obs[mb], "actions": actions[mb],
                        "logp_old": logp_old[mb], "adv": adv,
                        "returns": returns_flat[mb],
                    })
                which = ("policy", "value", "estimator")[
                    [np.isfinite(v) for v in losses].index(False)
                ]
                raise NonFiniteLoss(which, path)

            clip_grad_norm(pol_grads, p.max_grad_norm)
            clip_grad_norm(critic_grads, p.max_grad_norm)
            adams["policy"].step(ac.policy.parameters() + [ac.head.log_std], pol_grads)
            adams["critic"].step(ac.critic.parameters(), critic_grads)
            if ac.with_estimator:
                clip_grad_norm(est_grads, p.max_grad_norm)
                adams["estimator"].step(ac.estimator.parameters(), est_grads)

            with np.errstate(over="ignore"):
                kl = float(np.mean(logp_old[mb] - logp_new, dtype=np.float64))
            stats += (policy_loss, value_loss, entropy, est_loss, kl,
                      float((~active).mean()))
            count += 1

    out = stats / max(count, 1)
    return UpdateStats(*out)


def make_adams(ac: ActorCritic, cfg: Config) -> dict[str, Adam]:
    p = cfg.ppo
    kw = dict(lr=p.lr, beta1=p.adam_beta1, beta2=p.adam_beta2, eps=p.adam_eps)
    adams = {
        "policy": Adam(ac.policy.parameters() + [ac.head.log_std], **kw),
        "critic": Adam(ac.critic.parameters(), **kw),
    }
    if ac.with_estimator:
        adams["estimator"] = Adam(ac.estimator.parameters(), **kw)
    return adams


class Trainer:
    """Collect/update loop with JSONL metrics and resumable checkpoints."""

    def __init__(self, cfg: Config, run_dir: str, mode: str = "dribble",
                 fall_bank: dict | None = None):
        cfg.validate()
        self.cfg = cfg
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        self.mode = mode
        self.env = DribbleEnv(
            cfg.ppo.n_envs, cfg, seed=cfg.seed, mode=mode, fall_bank=fall_bank,
            worker_shards=cfg.ppo.worker_shards,
        )
        self.ac = ActorCritic(cfg, mode=mode, init_key=cfg.seed)
        self.adams = make_adams(self.ac, cfg)
        self.normalizer = ReturnNormalizer(cfg.ppo.n_envs, cfg.ppo.gamma,
                                           cfg.ppo.reward_normalization)
        self.action_rng = crng.CounterRng(cfg.seed, stream=1)
        self.shuffle_rng = crng.CounterRng(cfg.seed, stream=2)
        self.update_idx = 0
        self.env_steps = 0
        self.metrics_path = os.path.join(run_dir, "metrics.jsonl")

    def train(self, total_steps: int | None = None,
              log_every: int = 1) -> dict:
        cfg = self.cfg
        total = total_steps if total_steps is not None else cfg.ppo.total_timesteps
        steps_per_rollout = cfg.ppo.steps_per_rollout * cfg.ppo.n_envs
        last = {}
        t_start = time.perf_counter()
        while self.env_steps < total:
            t0 = time.perf_counter()
            buf = collect_rollout(self.env, self.ac, self.normalizer,
                                  self.action_rng, cfg)
            stats = ppo_update(buf, self.ac, self.adams, self.shuffle_rng, cfg,
                               dump_dir=self.run_dir)
            self.env_steps += steps_per_rollout
            self.update_idx += 1
            dt = time.perf_counter() - t0
            record = {
                "update": self.update_idx,
                "env_steps": self.env_steps,
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
                "entropy": stats.entropy,
                "estimator_loss": stats.estimator_loss,
                "approx_kl": stats.approx_kl,
                "clip_fraction": stats.clip_fraction,
                "reward_mean": buf.term_means.get("total", 0.0),
                "reward_terms": buf.term_means,
                "steps_per_s": steps_per_rollout / dt,
                "elapsed_s": time.perf_counter() - t_start,
            }
            if self.update_idx % log_every == 0:
                with open(self.metrics_path, "a") as f:
                    f.write(json.dumps(record) + "\n")
            if self.update_idx % cfg.ppo.checkpoint_every_updates == 0:
                self.save(os.path.join(self.run_dir, f"ckpt_{self.update_idx:06d}.bin"))
            last = record
        self.save(os.path.join(self.run_dir, "ckpt_final.bin"))
        self.ac.save(os.path.join(self.run_dir, f"{self.mode}_policy.bin"), cfg)
        return last

    # ------------------------------------------------------------ checkpoint
    def save(self, path: str) -> None:
        arrays = self.ac.state_arrays()
        for name, adam in self.adams.items():
            arrays.update(adam.state_arrays(f"adam.{name}"))
        arrays.update(self.normalizer.state_arrays("norm"))
        arrays.update({f"env.{k}": v for k, v in self.env.state_dict().items()})
        arrays["trainer.counters"] = np.array(
            [self.update_idx, self.env_steps,
             self.action_rng.counter, self.shuffle_rng.counter], dtype=np.int64,
        )
        save_checkpoint(path, arrays, {
            "mode": self.mode,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
        })

    def resume(self, path: str) -> None:
        arrays, _meta = load_checkpoint(path)
        self.ac.load_state_arrays(arrays)
        for name, adam in self.adams.items():
            adam.load_state_arrays(f"adam.{name}", arrays)
        self.normalizer.load_state_arrays("norm", arrays)
        self.env.load_state_dict(
            {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("env.")}
        )
        counters = arrays["trainer.counters"]
        self.update_idx = int(counters[0])
        self.env_steps = int(counters[1])
        self.action_rng.counter = int(counters[2])
        self.shuffle_rng.counter = int(counters[3])


def evaluate_tracking(ac: ActorCritic, cfg: Config, seed: int, n_envs: int,
                      n_steps: int, deterministic: bool = True) -> dict:
    """Run the policy and report mean reward terms plus estimator MSE."""
    env = DribbleEnv(n_envs, cfg, seed=seed, mode="dribble")
    rng = crng.CounterRng(seed, stream=9)
    term_sums: dict[str, float] = {}
    est_sq = np.zeros(ESTIMATOR_DIM, dtype=np.float64)
    for _ in range(n_steps):
        obs = env.policy_observation()
        est = ac.estimate(obs)
        mean = ac.policy.forward(ac.policy_input(obs, est))
        if deterministic:
            action = mean
        else:
            action, _, _ = ac.head.sample(mean, rng.normal(size=mean.shape))
        targets = env.estimator_targets()
        est_sq += ((est - targets) ** 2).mean(axis=0, dtype=np.float64)
        breakdown, _, _ = env.step(action)
        for k, v in breakdown.scalar_means().items():
            term_sums[k] = term_sums.get(k, 0.0) + v
    out = {k: v / n_steps for k, v in term_sums.items()}
    mse = est_sq / n_steps
    out["estimator_mse_body_vel"] = float(mse[:3].mean())
    out["estimator_mse_ball_vel"] = float(mse[3:5].mean())
    out["estimator_mse_drag"] = float(mse[5])
    return out
