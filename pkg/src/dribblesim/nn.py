"""Dense networks with hand-derived gradients, a diagonal-Gaussian policy
head, and Adam: the complete optimization toolbox for the trainer,
self-contained on numpy.

Storage defaults to float32; reductions that feed scalars (bias sums, loss
statistics) accumulate in float64.  Gradient-check tests run the same code in
float64 end to end.
"""

from __future__ import annotations

import json

import numpy as np

from . import rng as crng
from .io_container import load_arrays, save_arrays


class ShapeMismatch(ValueError):
    pass


def _elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z: np.ndarray, fz: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, 1.0, fz + 1.0)


def orthogonal_init(shape: tuple[int, int], gain: float, key: int,
                    dtype=np.float32) -> np.ndarray:
    """Orthogonal rows/columns scaled by gain, seeded by the counter RNG."""
    rows, cols = shape
    a = crng.keyed_normal(np.uint64(key), crng.CH_INIT, lanes=rows * cols)
    a = a.reshape(rows, cols)
    if rows < cols:
        q, r = np.linalg.qr(a.T)
        q = q.T * np.sign(np.diag(r))[:, None]
    else:
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
    return np.ascontiguousarray((gain * q[:rows, :cols]).astype(dtype))


class DenseNet:
    """Fully-connected net: ELU hidden layers, linear output."""

    def __init__(self, sizes: list[int], init_key: int = 0, dtype=np.float32,
                 hidden_gain: float = np.sqrt(2.0), out_gain: float = 0.01):
        self.sizes = list(sizes)
        self.dtype = dtype
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if i == len(sizes) - 2 else hidden_gain
            self.weights.append(
                orthogonal_init((n_in, n_out), gain, key=init_key * 1009 + i, dtype=dtype)
            )
            self.biases.append(np.zeros(n_out, dtype=dtype))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def set_parameters(self, params: list[np.ndarray]) -> None:
        k = self.n_layers
        for i in range(k):
            self.weights[i][...] = params[i]
            self.biases[i][...] = params[k + i]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: np.ndarray, cache: bool = False):
        """Batched forward; with cache=True also returns what backward needs."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeMismatch(
                f"expected input (B, {self.sizes[0]}), got {x.shape}"
            )
        acts = [x]
        zs = []
        h = x
        for i in range(self.n_layers):
            z = h @ self.weights[i] + self.biases[i]
            if i < self.n_layers - 1:
                zs.append(z)
                h = _elu(z)
                acts.append(h)
            else:
                h = z
        if cache:
            return h, (acts, zs)
        return h

    def backward(self, cache, grad_out: np.ndarray):
        """Gradients of sum(grad_out * output) w.r.t. parameters and input.

        Returns (param_grads aligned with parameters(), grad_input).
        """
        acts, zs = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        w_grads: list[np.ndarray] = [None] * self.n_layers
        b_grads: list[np.ndarray] = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            w_grads[i] = acts[i].T @ g
            b_grads[i] = g.sum(axis=0, dtype=np.float64).astype(self.dtype)
            g = g @ self.weights[i].T
            if i > 0:
                z = zs[i - 1]
                g = g * _elu_grad(z, acts[i])
        return w_grads + b_grads, g

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for i in range(self.n_layers):
            self.weights[i][...] = arrays[f"{prefix}.w{i}"]
            self.biases[i][...] = arrays[f"{prefix}.b{i}"]


class GaussianPolicyHead:
    """Diagonal Gaussian over actions: mean from the policy net, a learned
    state-independent log-std per action dimension."""

    def __init__(self, action_dim: int, init_log_std: float = -0.5, dtype=np.float32):
        self.log_std = np.full(action_dim, init_log_std, dtype=dtype)

    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, mean: np.ndarray, noise: np.ndarray):
        """Sample with externally supplied standard normals (for replayable
        streams); returns (action, log_prob, entropy-per-sample)."""
        action = mean + self.std() * noise
        return action, self.log_prob(mean, action), self.entropy()

    def log_prob(self, mean: np.ndarray, action: np.ndarray) -> np.ndarray:
        std = self.std()
        z = (action - mean) / std
        return (
            -0.5 * (z * z).sum(axis=-1)
            - self.log_std.sum()
            - 0.5 * mean.shape[-1] * np.log(2.0 * np.pi)
        )

    def entropy(self) -> float:
        return float(
            0.5 * self.log_std.shape[0] * (1.0 + np.log(2.0 * np.pi))
            + self.log_std.sum(dtype=np.float64)
        )

    def log_prob_grads(self, mean: np.ndarray, action: np.ndarray):
        """d log_prob / d mean (per sample) and d log_prob / d log_std."""
        std = self.std()
        diff = action - mean
        d_mean = diff / (std * std)
        d_log_std = (diff * diff) / (std * std) - 1.0
        return d_mean, d_log_std


class Adam:
    """Bias-corrected Adam over a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m):
            raise ShapeMismatch("parameter list changed size")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ShapeMismatch(f"grad shape {g.shape} != param {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for i in range(len(self.m)):
            self.m[i][...] = arrays[f"{prefix}.m{i}"]
            self.v[i][...] = arrays[f"{prefix}.v{i}"]


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Binary container of named arrays plus a JSON sidecar describing them."""
    save_arrays(path, arrays)
    sidecar = {
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "dtypes": {k: str(v.dtype) for k, v in arrays.items()},
        **meta,
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    arrays = load_arrays(path)
    with open(path + ".json") as f:
        meta = json.load(f)
    return arrays, meta
