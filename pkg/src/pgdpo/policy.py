"""Feed-forward control policies with hand-written forward and reverse passes.

``MlpPolicy`` maps (t, x) to a control vector through tanh hidden layers and
a per-coordinate output head (identity, or softplus for positivity-constrained
coordinates).  The reverse passes are explicit so the rollout adjoint can route
cotangents through the policy without a general autodiff framework:

* ``state_vjp``  - (d u / d x)^T g, used by the closed-loop costate recursion
* ``param_vjp``  - (d u / d theta)^T g, used by the warm-start gradient
* ``state_jacobian`` - the full (m x d) Jacobian, for diagnostics

All passes are batched over rows of ``x``.
"""

import io
import json
import struct

import numpy as np
from scipy.special import expit

from .errors import ContractError, PolicyNumericError

__all__ = ["MlpPolicy", "Controller", "init_policy", "save_checkpoint", "load_checkpoint"]


def _softplus(z):
    return np.logaddexp(0.0, z)


class Controller:
    """Anything that can drive a rollout: maps (t, x) to controls.

    Subclasses must implement ``act_cached`` and ``state_vjp``; trainable
    controllers additionally expose a flat parameter vector and ``param_vjp``.
    """

    m = None  # control dimension

    def act(self, t, x):
        return self.act_cached(t, x)[0]

    def act_cached(self, t, x):
        raise NotImplementedError

    def state_vjp(self, cache, g):
        """(d u / d x)^T g for each batch row; g has shape (B, m)."""
        raise NotImplementedError

    def state_jacobian(self, t, x):
        """Exact (B, m, d) Jacobian of ``act`` w.r.t. x, via m reverse sweeps."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, cache = self.act_cached(t, x)
        rows = []
        for i in range(self.m):
            g = np.zeros((x.shape[0], self.m))
            g[:, i] = 1.0
            rows.append(self.state_vjp(cache, g))
        return np.stack(rows, axis=1)


class MlpPolicy(Controller):
    """tanh MLP u(t, x) with explicit time input and per-coordinate output heads.

    Parameters are stored as per-layer weight matrices ``weights[l]`` of shape
    (fan_out, fan_in) and bias vectors ``biases[l]``.  Inputs are normalized as
    ``[t / t_scale, (x - x_center) / x_scale]`` before the first layer.
    """

    def __init__(self, widths, heads=None, t_scale=1.0, x_center=None, x_scale=None, seed=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ContractError("widths must list input and output sizes")
        self.widths = widths
        self.d = widths[0] - 1
        self.m = widths[-1]
        if self.d < 1:
            raise ContractError("input width must be 1 + state dimension")
        heads = list(heads) if heads is not None else ["identity"] * self.m
        if len(heads) != self.m or any(h not in ("identity", "softplus") for h in heads):
            raise ContractError("heads must give 'identity' or 'softplus' per output")
        self.heads = heads
        self._softplus_mask = np.array([h == "softplus" for h in heads])
        self.t_scale = float(t_scale)
        self.x_center = np.zeros(self.d) if x_center is None else np.asarray(x_center, dtype=float)
        self.x_scale = np.ones(self.d) if x_scale is None else np.asarray(x_scale, dtype=float)
        if self.x_center.shape != (self.d,) or self.x_scale.shape != (self.d,):
            raise ContractError("normalization constants must match the state dimension")
        self.seed = seed
        self.weights = [np.zeros((widths[l + 1], widths[l])) for l in range(len(widths) - 1)]
        self.biases = [np.zeros(widths[l + 1]) for l in range(len(widths) - 1)]

    # ----------------------------------------------------------------- params
    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self):
        """Flat parameter vector theta (weights then bias, layer by layer)."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got {theta.shape}")
        ofs = 0
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = theta[ofs:ofs + w.size].reshape(w.shape).copy()
            ofs += w.size
            self.biases[l] = theta[ofs:ofs + b.size].copy()
            ofs += b.size

    # ---------------------------------------------------------------- forward
    def _features(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tcol = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1) if np.ndim(t) else
                               np.full((1, 1), float(t)), (x.shape[0], 1))
        return np.concatenate([tcol / self.t_scale, (x - self.x_center) / self.x_scale], axis=1)

    def act_cached(self, t, x):
        a = self._features(t, x)
        activations = [a]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w.T
            z += b
            a = np.tanh(z, out=z)
            activations.append(a)
        z = a @ self.weights[-1].T
        z += self.biases[-1]
        if self._softplus_mask.any():
            u = np.where(self._softplus_mask, _softplus(z), z)
        else:
            u = z
        if not np.all(np.isfinite(u)):
            self._raise_nonfinite(activations, z)
        return u, (activations, z)

    def _raise_nonfinite(self, activations, z):
        for idx, a in enumerate(activations):
            if not np.all(np.isfinite(a)):
                raise PolicyNumericError(f"non-finite activation in layer {idx}", layer_index=idx)
        raise PolicyNumericError("non-finite activation in output layer",
                                 layer_index=len(activations))

    # ---------------------------------------------------------------- reverse
    def _head_deriv(self, z):
        if self._softplus_mask.any():
            return np.where(self._softplus_mask, expit(z), 1.0)
        return None  # identity everywhere

    def _deltas(self, cache, g):
        """Backpropagated layer deltas, output layer first."""
        activations, z = cache
        hd = self._head_deriv(z)
        delta = g * hd if hd is not None else g
        deltas = [delta]
        for l in range(len(self.weights) - 1, 0, -1):
            delta = delta @ self.weights[l]
            act = activations[l]
            gate = np.square(act)
            np.subtract(1.0, gate, out=gate)
            delta *= gate
            deltas.append(delta)
        return deltas  # deltas[i] pairs with layer (n_layers - 1 - i)

    def state_vjp(self, cache, g):
        deltas = self._deltas(cache, g)
        g_feat = deltas[-1] @ self.weights[0]
        return g_feat[:, 1:] / self.x_scale

    def param_vjp(self, cache, g):
        """Sum over the batch of per-path parameter cotangents, flat layout."""
        activations, _ = cache
        deltas = self._deltas(cache, g)
        parts = []
        for l in range(len(self.weights)):
            delta = deltas[len(self.weights) - 1 - l]
            parts.append((delta.T @ activations[l]).ravel())
            parts.append(delta.sum(axis=0))
        return np.concatenate(parts)

    def param_vjp_per_path(self, cache, g):
        """Per-path parameter cotangents, shape (B, n_params)."""
        activations, _ = cache
        deltas = self._deltas(cache, g)
        parts = []
        for l in range(len(self.weights)):
            delta = deltas[len(self.weights) - 1 - l]
            parts.append(np.einsum("bo,bi->boi", delta, activations[l]).reshape(delta.shape[0], -1))
            parts.append(delta)
        return np.concatenate(parts, axis=1)


def init_policy(widths, seed, heads=None, t_scale=1.0, x_center=None, x_scale=None):
    """Glorot-uniform weights, zero biases; reproducible from ``seed``."""
    policy = MlpPolicy(widths, heads=heads, t_scale=t_scale, x_center=x_center,
                       x_scale=x_scale, seed=seed)
    rng = np.random.default_rng(seed)
    for l in range(len(policy.weights)):
        fan_out, fan_in = policy.weights[l].shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        policy.weights[l] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return policy


_MAGIC = b"UPOL"


def save_checkpoint(policy, path):
    """Write a checkpoint: JSON header + flat little-endian float64 theta."""
    header = {
        "widths": policy.widths,
        "heads": policy.heads,
        "t_scale": policy.t_scale,
        "x_center": policy.x_center.tolist(),
        "x_scale": policy.x_scale.tolist(),
        "seed": policy.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    theta = policy.get_params().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(theta.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != _MAGIC:
        raise ContractError(f"{path} is not a policy checkpoint")
    (n,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(n).decode("utf-8"))
    theta = np.frombuffer(buf.read(), dtype="<f8")
    policy = MlpPolicy(header["widths"], heads=header["heads"], t_scale=header["t_scale"],
                       x_center=header["x_center"], x_scale=header["x_scale"],
                       seed=header["seed"])
    policy.set_params(theta)
    return policy
