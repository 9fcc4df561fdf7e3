"""Small dense/recurrent network stack with hand-written gradients.

Everything runs in float64 numpy. Forward passes are pure functions that
return an explicit cache; the matching backward consumes that cache and
returns gradients, so inference never mutates shared state and a training
step is a plain (forward, backward, adam.step) loop. Hidden activations
are tanh throughout, which keeps every network smooth; the only kinks in
the whole loss stack are the explicit hinges and clamps of the losses and
augmentations themselves.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

FLOAT = np.float64

CHECKPOINT_FORMAT = "eegrecon.checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A training loop hit a non-finite loss."""


def derive_seed(seed, *tags):
    """Stable 32-bit seed derived from a base seed and string tags."""
    text = ":".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def require_finite(arr, name):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


class Mlp:
    """Fully connected stack, tanh hiddens, configurable output squash.

    ``sizes`` lists layer widths including input and output, e.g.
    ``(96, 256, 12288)``. ``out`` is one of "linear", "sigmoid", "tanh".
    """

    def __init__(self, sizes, out="linear", seed=0):
        if len(sizes) < 2:
            raise ValueError("Mlp needs at least input and output sizes")
        if out not in ("linear", "sigmoid", "tanh"):
            raise ValueError(f"unknown output nonlinearity {out!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.out = out
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)).astype(FLOAT)
            self.params[f"b{i}"] = np.zeros(n_out, dtype=FLOAT)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x, cache=None):
        """Map (B, sizes[0]) to (B, sizes[-1]); fills ``cache`` if given."""
        h = np.asarray(x, dtype=FLOAT)
        acts = [h]
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            last = i == self.n_layers - 1
            if not last:
                h = np.tanh(z)
            elif self.out == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-z))
            elif self.out == "tanh":
                h = np.tanh(z)
            else:
                h = z
            acts.append(h)
        if cache is not None:
            cache["acts"] = acts
        return h

    def backward(self, cache, gy):
        """Return (grad wrt input, grads dict) for the cached forward."""
        acts = cache["acts"]
        grads = {}
        g = np.asarray(gy, dtype=FLOAT)
        for i in reversed(range(self.n_layers)):
            h_out = acts[i + 1]
            last = i == self.n_layers - 1
            if not last or self.out == "tanh":
                g = g * (1.0 - h_out * h_out)
            elif self.out == "sigmoid":
                g = g * h_out * (1.0 - h_out)
            h_in = acts[i]
            grads[f"W{i}"] = h_in.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return g, grads


class RecurrentNet:
    """Stacked tanh recurrence over time with a linear readout head.

    Input is (B, C, T); each time step feeds the C channel values into the
    recurrence. The final hidden state of the top layer is projected to
    ``out_dim``.
    """

    def __init__(self, in_dim, hidden_dim, out_dim, layers=1, seed=0):
        if layers < 1:
            raise ValueError("layers must be >= 1")
        self.in_dim = int(in_dim)
        self.hidden_dim = int(hidden_dim)
        self.out_dim = int(out_dim)
        self.layers = int(layers)
        rng = np.random.default_rng(seed)
        self.params = {}
        for l in range(self.layers):
            d = self.in_dim if l == 0 else self.hidden_dim
            self.params[f"Wx{l}"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, self.hidden_dim)).astype(FLOAT)
            # scaled-down recurrent weights keep long unrolls stable
            self.params[f"Wh{l}"] = rng.normal(0.0, 0.5 / np.sqrt(self.hidden_dim), (self.hidden_dim, self.hidden_dim)).astype(FLOAT)
            self.params[f"bh{l}"] = np.zeros(self.hidden_dim, dtype=FLOAT)
        self.params["Wo"] = rng.normal(0.0, 1.0 / np.sqrt(self.hidden_dim), (self.hidden_dim, self.out_dim)).astype(FLOAT)
        self.params["bo"] = np.zeros(self.out_dim, dtype=FLOAT)

    def forward(self, x, cache=None):
        """Map (B, C, T) to (B, out_dim)."""
        x = np.asarray(x, dtype=FLOAT)
        if x.ndim != 3 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input (B, {self.in_dim}, T), got {x.shape}")
        batch, _, steps = x.shape
        layer_inputs = x.transpose(2, 0, 1)  # (T, B, C)
        all_states = []
        for l in range(self.layers):
            wx, wh, bh = self.params[f"Wx{l}"], self.params[f"Wh{l}"], self.params[f"bh{l}"]
            h = np.zeros((batch, self.hidden_dim), dtype=FLOAT)
            states = np.empty((steps, batch, self.hidden_dim), dtype=FLOAT)
            for t in range(steps):
                h = np.tanh(layer_inputs[t] @ wx + h @ wh + bh)
                states[t] = h
            all_states.append(states)
            layer_inputs = states
        top = all_states[-1][-1]
        y = top @ self.params["Wo"] + self.params["bo"]
        if cache is not None:
            cache["x"] = x
            cache["states"] = all_states
            cache["top"] = top
        return y

    def backward(self, cache, gy):
        """Backprop through time; returns (grad wrt input, grads dict)."""
        x = cache["x"]
        all_states = cache["states"]
        steps = x.shape[2]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        gy = np.asarray(gy, dtype=FLOAT)
        grads["Wo"] = cache["top"].T @ gy
        grads["bo"] = gy.sum(axis=0)

        # gradient arriving at each layer's hidden sequence, top first
        g_seq = np.zeros((steps,) + all_states[-1][0].shape, dtype=FLOAT)
        g_seq[-1] = gy @ self.params["Wo"].T
        for l in reversed(range(self.layers)):
            states = all_states[l]
            below = x.transpose(2, 0, 1) if l == 0 else all_states[l - 1]
            wx, wh = self.params[f"Wx{l}"], self.params[f"Wh{l}"]
            g_below = np.zeros((steps,) + below[0].shape, dtype=FLOAT)
            gh = np.zeros_like(states[0])
            for t in reversed(range(steps)):
                gh = gh + g_seq[t]
                gpre = gh * (1.0 - states[t] * states[t])
                grads[f"Wx{l}"] += below[t].T @ gpre
                h_prev = states[t - 1] if t > 0 else np.zeros_like(states[0])
                grads[f"Wh{l}"] += h_prev.T @ gpre
                grads[f"bh{l}"] += gpre.sum(axis=0)
                g_below[t] = gpre @ wx.T
                gh = gpre @ wh.T
            g_seq = g_below
        gx = g_seq.transpose(1, 2, 0)  # (B, C, T)
        return gx, grads


class Adam:
    """Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, g in grads.items():
            m = self.m[key] = b1 * self.m[key] + (1 - b1) * g
            v = self.v[key] = b2 * self.v[key] + (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            self.params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict
    extra: dict


def save_checkpoint(path, kind, config, params, extra=None):
    """Write a versioned npz container with metadata and parameter tensors."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "extra": extra or {},
    }
    payload = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for key, value in params.items():
        payload[f"p:{key}"] = np.asarray(value)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path} is not a checkpoint container")
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected container format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        params = {key[2:]: data[key].astype(FLOAT) for key in data.files if key.startswith("p:")}
    return Checkpoint(kind=meta["kind"], config=meta["config"], params=params, extra=meta.get("extra", {}))
