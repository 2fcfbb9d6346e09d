"""Small fully connected networks with hand-written backprop, plus Adam.

Used both by the DDPG actor/critic and by the field model's MLP head.
Everything is float64 numpy; forward/backward are pure given the parameter
arrays, so gradient checking against finite differences is straightforward.
"""

from __future__ import annotations

import numpy as np

_ACTIVATIONS = ("relu", "sigmoid", "identity")


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # Split by sign to stay overflow-free for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply(name, x):
    if name == "relu":
        return relu(x)
    if name == "sigmoid":
        return sigmoid(x)
    return x


def _backprop_activation(name, activated, dy):
    if name == "relu":
        return dy * (activated > 0)
    if name == "sigmoid":
        return dy * activated * (1.0 - activated)
    return dy


class Mlp:
    """Dense network: sizes[0] -> ... -> sizes[-1].

    hidden_activation applies after every layer except the last;
    output_activation after the last. final_init controls the last layer:
    "default" (He), "zeros" (actor starts mid-range), or "small" (uniform
    +-3e-3, the usual critic head initialization).
    """

    def __init__(self, sizes, rng: np.random.Generator, hidden_activation="relu",
                 output_activation="identity", final_init="default"):
        if hidden_activation not in _ACTIVATIONS or output_activation not in _ACTIVATIONS:
            raise ValueError("unknown activation")
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.weights = []
        self.biases = []
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            last = i == n_layers - 1
            if last and final_init == "zeros":
                w = np.zeros((fan_in, fan_out))
            elif last and final_init == "small":
                w = rng.uniform(-3e-3, 3e-3, size=(fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self):
        """Flat parameter list: W0, b0, W1, b1, ... (shared references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def _activation_for(self, layer_index):
        last = layer_index == len(self.weights) - 1
        return self.output_activation if last else self.hidden_activation

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer activations for backward."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _apply(self._activation_for(i), h @ w + b)
            acts.append(h)
        y = acts[-1][0] if squeeze else acts[-1]
        return y, acts

    def backward(self, acts, dy: np.ndarray):
        """Backprop dy (dLoss/dOutput) through the cached forward pass.

        Returns (dx, grads) with grads aligned to self.params.
        """
        dy = np.asarray(dy, dtype=np.float64)
        if dy.ndim == 1:
            dy = dy[None, :]
        grads = [None] * (2 * len(self.weights))
        delta = dy
        for i in range(len(self.weights) - 1, -1, -1):
            delta = _backprop_activation(self._activation_for(i), acts[i + 1], delta)
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        return delta, grads

    def copy(self) -> "Mlp":
        dup = object.__new__(Mlp)
        dup.sizes = self.sizes
        dup.hidden_activation = self.hidden_activation
        dup.output_activation = self.output_activation
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, in place."""
    for tp, sp in zip(target.params, source.params):
        tp *= 1.0 - tau
        tp += tau * sp


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
