"""Data-attention aggregation of the K masked network outputs.

Each branch output is average-pooled to one number; a two-layer perceptron
(K -> hidden -> K, ReLU in between) maps the K-vector to logits, and a softmax
turns them into positive weights summing to one.  The aggregate is the
weighted sum of the branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import tensor_core as tc

HIDDEN = 64


@dataclass
class AttentionNet:
    W1: np.ndarray  # (hidden, K)
    b1: np.ndarray
    W2: np.ndarray  # (K, hidden)
    b2: np.ndarray

    def __post_init__(self):
        hidden, K = self.W1.shape
        if self.b1.shape != (hidden,) or self.W2.shape != (K, hidden) or self.b2.shape != (K,):
            raise tc.DimensionError(
                f"inconsistent attention shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}")

    @property
    def K(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> "AttentionNet":
        return cls(**{k: np.asarray(params[k], dtype=np.float64) for k in ("W1", "b1", "W2", "b2")})


def init_attention(K: int, hidden: int = HIDDEN, seed: int = 0) -> AttentionNet:
    """He-initialized first layer; zero output layer so training starts from uniform weights."""
    rng = np.random.default_rng(seed)
    return AttentionNet(rng.normal(0.0, np.sqrt(2.0 / K), size=(hidden, K)), np.zeros(hidden),
                        np.zeros((K, hidden)), np.zeros(K))


def zero_attention(K: int, hidden: int = HIDDEN) -> AttentionNet:
    return AttentionNet(np.zeros((hidden, K)), np.zeros(hidden), np.zeros((K, hidden)), np.zeros(K))


def _stack(branch_outputs) -> np.ndarray:
    if isinstance(branch_outputs, np.ndarray):
        return tc.as_tensor(branch_outputs)
    shapes = {np.shape(b) for b in branch_outputs}
    if len(shapes) != 1:
        raise tc.DimensionError(f"branch outputs have differing shapes {sorted(shapes)}")
    return np.stack([tc.as_tensor(b) for b in branch_outputs])


def pooled_features(branch_outputs) -> np.ndarray:
    """Mean over channels and space of each branch; returns a length-K vector."""
    B = _stack(branch_outputs)
    if B.shape[0] < 1:
        raise tc.DimensionError("need at least one branch")
    return B.reshape(B.shape[0], -1).mean(axis=1)


def attention_weights(features, net: AttentionNet) -> np.ndarray:
    f = tc.as_tensor(features)
    if f.shape[-1] != net.K:
        raise tc.DimensionError(f"feature dimension {f.shape[-1]} does not match K={net.K}")
    return GraphAttention(net, requires_grad=False).weights_from_features(f).value


def aggregate(branch_outputs, w) -> np.ndarray:
    B = _stack(branch_outputs)
    w = tc.as_tensor(w)
    if w.shape != (B.shape[0],):
        raise tc.DimensionError(f"{w.shape[0] if w.ndim else 0} weights for {B.shape[0]} branches")
    return np.tensordot(w, B, axes=1)


class GraphAttention:
    """Differentiable attention over a batch of branch stacks ``(batch, K, ...)``."""

    def __init__(self, net: AttentionNet, requires_grad: bool = True):
        self.net = net
        wrap = ag.param if requires_grad else ag.lift
        self.params = {k: wrap(v) for k, v in net.params.items()}

    def weights_from_features(self, feats) -> ag.Var:
        P = self.params
        h = ag.relu(ag.matmul(feats, ag.transpose(P["W1"])) + P["b1"])
        return ag.softmax(ag.matmul(h, ag.transpose(P["W2"])) + P["b2"], axis=-1)

    def weights(self, branches) -> ag.Var:
        b = ag.lift(branches)
        B, K = b.shape[:2]
        if K != self.net.K:
            raise tc.DimensionError(f"{K} branches for an attention network with K={self.net.K}")
        feats = ag.reduce_mean(ag.reshape(b, (B, K, -1)), axis=2)
        return self.weights_from_features(feats)

    def aggregate(self, branches) -> ag.Var:
        b = ag.lift(branches)
        w = self.weights(b)
        w = ag.reshape(w, w.shape + (1,) * (b.value.ndim - 2))
        return ag.reduce_sum(b * w, axis=1)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for k, v in self.params.items()}


def attention_gradients(net: AttentionNet, branch_outputs, target) -> dict[str, np.ndarray]:
    """Gradient of ``||target - aggregate(branches)||^2`` with respect to the
    attention parameters, branch outputs held fixed."""
    B = _stack(branch_outputs)
    target = tc.as_tensor(target)
    tc.check_same_shape(target, B[0], "attention target")
    A = GraphAttention(net)
    resid = ag.lift(target[None]) - A.aggregate(B[None])
    ag.backward(ag.reduce_sum(ag.square(resid)))
    return A.grads()
