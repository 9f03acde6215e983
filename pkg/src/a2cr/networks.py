"""Shared-trunk policy/value network and the standalone reasoner network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import ParamSet, Tensor

NUM_PURPOSES = 4


@dataclass(frozen=True)
class Architecture:
    """Layer sizes; the defaults fit a 3x64x64 frame stack."""

    in_channels: int = 3
    height: int = 64
    width: int = 64
    conv_channels: tuple = (16, 32, 32)
    conv_kernels: tuple = (8, 4, 3)
    conv_strides: tuple = (4, 2, 1)
    feature_dim: int = 256
    head_hidden: int = 128
    reasoner_hidden2: int = 64
    num_actions: int = 12

    def conv_output_hw(self) -> tuple:
        h, w = self.height, self.width
        for k, s in zip(self.conv_kernels, self.conv_strides):
            h = T.conv_output_size(h, k, s)
            w = T.conv_output_size(w, k, s)
        if h < 1 or w < 1:
            raise ShapeError(f"frames of {self.height}x{self.width} are too small for the conv trunk")
        return h, w

    @property
    def input_shape(self) -> tuple:
        return (self.in_channels, self.height, self.width)


def _add_dense(params: ParamSet, rng, prefix: str, n_in: int, n_out: int) -> None:
    params.add(f"{prefix}.weight", T.glorot_uniform(rng, (n_out, n_in), n_in, n_out))
    params.add(f"{prefix}.bias", np.zeros(n_out, dtype=T.DEFAULT_DTYPE))


def _add_trunk(params: ParamSet, rng, arch: Architecture) -> None:
    c_in = arch.in_channels
    for i, (c_out, k) in enumerate(zip(arch.conv_channels, arch.conv_kernels), start=1):
        shape = (c_out, c_in, k, k)
        params.add(f"trunk.conv{i}.kernel", T.glorot_uniform(rng, shape, c_in * k * k, c_out * k * k))
        params.add(f"trunk.conv{i}.bias", np.zeros(c_out, dtype=T.DEFAULT_DTYPE))
        c_in = c_out
    h, w = arch.conv_output_hw()
    _add_dense(params, rng, "trunk.fc", c_in * h * w, arch.feature_dim)


def _trunk_forward(params: ParamSet, arch: Architecture, x: Tensor, keep: dict | None = None) -> Tensor:
    for i, s in enumerate(arch.conv_strides, start=1):
        x = T.conv2d(x, params[f"trunk.conv{i}.kernel"], s)
        x = T.relu(T.add_channel_bias(x, params[f"trunk.conv{i}.bias"]))
        if keep is not None:
            keep[f"conv{i}"] = x
    n = x.shape[0]
    x = x.reshape(n, -1)
    return T.relu(T.dense(x, params["trunk.fc.weight"], params["trunk.fc.bias"]))


def _as_batch(state, arch: Architecture) -> tuple:
    """Return (batched tensor, was_single)."""
    t = state if isinstance(state, Tensor) else Tensor(np.asarray(state, dtype=T.DEFAULT_DTYPE))
    if t.shape == arch.input_shape:
        return t.reshape(1, *arch.input_shape), True
    if t.data.ndim == 4 and t.shape[1:] == arch.input_shape:
        return t, False
    raise ShapeError(f"expected input of shape {arch.input_shape} (optionally batched), got {t.shape}")


class PolicyValueNet:
    """Conv trunk shared by a softmax policy head and a linear value head."""

    def __init__(self, arch: Architecture = Architecture(), seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        _add_trunk(self.params, rng, arch)
        _add_dense(self.params, rng, "policy.fc1", arch.feature_dim, arch.head_hidden)
        _add_dense(self.params, rng, "policy.fc2", arch.head_hidden, arch.num_actions)
        _add_dense(self.params, rng, "value.fc1", arch.feature_dim, arch.head_hidden)
        _add_dense(self.params, rng, "value.fc2", arch.head_hidden, 1)

    def forward_logits(self, state) -> tuple:
        """Batched forward returning (policy logits [N, A], values [N]) tensors."""
        x, _ = _as_batch(state, self.arch)
        p = self.params
        feat = _trunk_forward(p, self.arch, x)
        h = T.relu(T.dense(feat, p["policy.fc1.weight"], p["policy.fc1.bias"]))
        logits = T.dense(h, p["policy.fc2.weight"], p["policy.fc2.bias"])
        hv = T.relu(T.dense(feat, p["value.fc1.weight"], p["value.fc1.bias"]))
        value = T.dense(hv, p["value.fc2.weight"], p["value.fc2.bias"]).reshape(-1)
        return logits, value

    def forward(self, state) -> tuple:
        """Return (action probabilities, state value) as numpy arrays.

        A single [C,H,W] state gives a length-A vector and a float; a batch
        gives [N, A] and [N].
        """
        _, single = _as_batch(state, self.arch)
        with T.no_grad():
            logits, value = self.forward_logits(state)
            probs = T.softmax(logits).data
        if single:
            return probs[0], float(value.data[0])
        return probs, value.data


class ReasonerNet:
    """Independent conv trunk plus a three-layer head emitting 4 purpose logits."""

    def __init__(self, arch: Architecture = Architecture(), seed: int = 1):
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        _add_trunk(self.params, rng, arch)
        _add_dense(self.params, rng, "reasoner.fc1", arch.feature_dim, arch.head_hidden)
        _add_dense(self.params, rng, "reasoner.fc2", arch.head_hidden, arch.reasoner_hidden2)
        _add_dense(self.params, rng, "reasoner.fc3", arch.reasoner_hidden2, NUM_PURPOSES)

    def forward_logits(self, delta, keep: dict | None = None) -> Tensor:
        """Batched logits [N, 4]; ``keep`` receives the conv activations."""
        x, _ = _as_batch(delta, self.arch)
        p = self.params
        feat = _trunk_forward(p, self.arch, x, keep)
        h = T.relu(T.dense(feat, p["reasoner.fc1.weight"], p["reasoner.fc1.bias"]))
        h = T.relu(T.dense(h, p["reasoner.fc2.weight"], p["reasoner.fc2.bias"]))
        return T.dense(h, p["reasoner.fc3.weight"], p["reasoner.fc3.bias"])

    def forward(self, delta) -> np.ndarray:
        """Raw logits: length 4 for one Δs, [N, 4] for a batch."""
        _, single = _as_batch(delta, self.arch)
        with T.no_grad():
            logits = self.forward_logits(delta).data
        return logits[0] if single else logits


def forward_policy_value(net: PolicyValueNet, state) -> tuple:
    return net.forward(state)


def forward_reasoner(net: ReasonerNet, delta) -> np.ndarray:
    return net.forward(delta)


def policy_entropy(probs) -> float:
    """Shannon entropy in nats; 0·log 0 counts as 0."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))
