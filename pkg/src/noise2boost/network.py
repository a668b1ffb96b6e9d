"""Symmetric encoder-decoder ReLU network and its pointwise linear representation.

Encoder stage ``l`` computes ``relu(bn(pool(conv_flipped(x, enc_l))))``; decoder
stage ``l`` computes ``relu(bn(conv(unpool(x), dec_l)))`` except the output
stage, which is linear.  Without biases and with batch norm off or frozen into
a per-channel gain the network is positively homogeneous, so at any input
away from ReLU kinks ``F(x) = J(x) x`` with ``J(x)`` the network evaluated with
every ReLU replaced by its 0/1 activation pattern.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from . import tensor_core as tc

BN_MODES = ("off", "linear_eval", "train")
DENSE_LIMIT = 4096


class FrameModeError(ValueError):
    """The configuration does not admit an exact frame representation."""


@dataclass(frozen=True)
class NetworkConfig:
    stages: int = 2
    channels: tuple[int, ...] = (1, 8, 16)
    taps: int = 3
    spatial: tuple[int, ...] = (32, 32)
    pooling: bool = True
    skip_connections: bool = False
    bn_mode: str = "off"
    bias_free: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "spatial", tuple(int(s) for s in self.spatial))
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if len(self.channels) != self.stages + 1:
            raise ValueError(f"need {self.stages + 1} channel counts, got {self.channels}")
        if self.taps < 1 or self.taps % 2 == 0:
            raise ValueError(f"taps must be odd, got {self.taps}")
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}")
        if len(self.spatial) not in (1, 2):
            raise ValueError("only 1-D and 2-D signals are supported")
        if self.pooling:
            f = 2 ** self.stages
            if any(s % f for s in self.spatial):
                raise ValueError(f"spatial extents {self.spatial} not divisible by {f}")
        deepest = min(self.spatial) // (2 ** (self.stages - 1) if self.pooling else 1)
        if self.taps > deepest:
            raise ValueError(f"{self.taps}-tap kernel exceeds extent {deepest} at the deepest stage")

    @property
    def spatial_ndim(self) -> int:
        return len(self.spatial)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.channels[0],) + self.spatial

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def frame_analyzable(self) -> bool:
        return self.bias_free and not self.skip_connections and self.bn_mode in ("off", "linear_eval")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["spatial"] = list(self.spatial)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "channels": tuple(d["channels"]), "spatial": tuple(d["spatial"])})


def _bn_layers(cfg: NetworkConfig) -> list[tuple[str, int]]:
    q = cfg.channels
    layers = [(f"enc{l}", q[l]) for l in range(1, cfg.stages + 1)]
    layers += [(f"dec{l}", q[l - 1]) for l in range(cfg.stages, 1, -1)]
    return layers


@dataclass
class Network:
    """Parameters (kernels, BN scales, optional biases) plus BN running statistics."""

    config: NetworkConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name}: shape {self.params[name].shape}, expected {shape}")
        extra = set(self.params) - set(expected)
        if extra:
            raise ValueError(f"unexpected parameters {sorted(extra)}")
        if self.config.bn_mode != "off":
            for name, c in _bn_layers(self.config):
                self.state.setdefault(f"{name}.bn_mean", np.zeros(c))
                self.state.setdefault(f"{name}.bn_var", np.ones(c))

    def copy(self, **changes) -> "Network":
        params = {k: v.copy() for k, v in self.params.items()}
        state = {k: v.copy() for k, v in self.state.items()}
        return Network(changes.get("config", self.config), changes.get("params", params),
                       changes.get("state", state))

    def with_bn_mode(self, mode: str) -> "Network":
        """Same parameters and statistics under another batch-norm mode."""
        if (mode == "off") != (self.config.bn_mode == "off"):
            raise ValueError("cannot switch batch norm on or off for existing parameters")
        return self.copy(config=dataclasses.replace(self.config, bn_mode=mode))

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[0]


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    q, taps = cfg.channels, (cfg.taps,) * cfg.spatial_ndim
    shapes = {}
    for l in range(1, cfg.stages + 1):
        shapes[f"enc{l}.w"] = (q[l], q[l - 1]) + taps
        shapes[f"dec{l}.w"] = (q[l - 1], q[l]) + taps
        if not cfg.bias_free:
            shapes[f"enc{l}.b"] = (q[l],)
            shapes[f"dec{l}.b"] = (q[l - 1],)
    if cfg.bn_mode != "off":
        for name, c in _bn_layers(cfg):
            shapes[f"{name}.bn"] = (c,)
    return shapes


def init_network(config: NetworkConfig, seed: int = 0, weight_scale: float = 1.0) -> Network:
    """He-normal kernels, unit BN scales, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = weight_scale * rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".bn"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return Network(config, params)


def identity_network(length_or_shape, stages: int = 1) -> Network:
    """Single-channel network without pooling whose kernels are all unit impulses.

    It computes ``relu(x)``; for positive inputs this is the identity map.
    """
    spatial = (length_or_shape,) if np.isscalar(length_or_shape) else tuple(length_or_shape)
    cfg = NetworkConfig(stages=stages, channels=(1,) * (stages + 1), taps=1,
                        spatial=spatial, pooling=False)
    params = {name: np.ones(shape) for name, shape in parameter_shapes(cfg).items()}
    return Network(cfg, params)


# ---------------------------------------------------------------------------
# graph construction


def _channel(v, ndim: int):
    return ag.reshape(ag.lift(v), (1, -1) + (1,) * (ndim - 2))


class _Builder:
    """Evaluates the network on Vars with pluggable activation and BN handling."""

    def __init__(self, net: Network, params: dict[str, ag.Var], act: Callable,
                 bn_training: bool = False):
        self.net = net
        self.cfg = net.config
        self.P = params
        self.act = act
        self.bn_training = bn_training
        self.batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def bn(self, name: str, h: ag.Var) -> ag.Var:
        mode = self.cfg.bn_mode
        if mode == "off":
            return h
        nd = h.value.ndim
        scale = self.P[f"{name}.bn"]
        var = self.net.state[f"{name}.bn_var"]
        if mode == "linear_eval":
            return h * _channel(scale, nd) * _channel(1.0 / np.sqrt(var + tc.BN_EPS), nd)
        if self.bn_training:
            out, mean, bvar = ag.batch_norm_train(h, scale)
            count = h.value.size // h.value.shape[1]
            self.batch_stats[name] = (mean, bvar * count / max(count - 1, 1))
            return out
        mean = self.net.state[f"{name}.bn_mean"]
        return ((h - _channel(ag.lift(mean), nd)) * _channel(scale, nd)
                * _channel(1.0 / np.sqrt(var + tc.BN_EPS), nd))

    def bias(self, name: str, h: ag.Var) -> ag.Var:
        if self.cfg.bias_free:
            return h
        return h + _channel(self.P[f"{name}.b"], h.value.ndim)

    def encode(self, x: ag.Var) -> tuple[ag.Var, list[ag.Var]]:
        cfg, d = self.cfg, self.cfg.spatial_ndim
        h, feats = x, [x]
        for l in range(1, cfg.stages + 1):
            h = self.bias(f"enc{l}", ag.conv(h, self.P[f"enc{l}.w"], flipped=True))
            if cfg.pooling:
                h = ag.pool(h, d)
            h = self.act(f"enc{l}", self.bn(f"enc{l}", h))
            feats.append(h)
        return h, feats

    def decode(self, z: ag.Var, feats: list[ag.Var] | None = None) -> ag.Var:
        cfg, d = self.cfg, self.cfg.spatial_ndim
        h = z
        for l in range(cfg.stages, 0, -1):
            if cfg.pooling:
                h = ag.unpool(h, d)
            h = self.bias(f"dec{l}", ag.conv(h, self.P[f"dec{l}.w"], flipped=False))
            if l > 1:
                if cfg.skip_connections and feats is not None:
                    h = h + feats[l - 1]
                h = self.act(f"dec{l}", self.bn(f"dec{l}", h))
        return h

    def __call__(self, x) -> ag.Var:
        z, feats = self.encode(ag.lift(x))
        return self.decode(z, feats)


def _batched(cfg: NetworkConfig, x) -> tuple[np.ndarray, bool]:
    x = tc.as_tensor(x)
    shape = cfg.input_shape
    if x.shape == shape:
        return x[None], True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise tc.DimensionError(f"input shape {x.shape} does not match network input {shape}")


def _const_params(net: Network) -> dict[str, ag.Var]:
    return {k: ag.lift(v) for k, v in net.params.items()}


# ---------------------------------------------------------------------------
# forward pass and activation traces


@dataclass
class ActivationTrace:
    """0/1 ReLU patterns per layer (leading batch axis kept) and the smallest
    preactivation magnitude seen."""

    patterns: dict[str, np.ndarray]
    margin: float

    def key(self) -> bytes:
        h = hashlib.sha1()
        for name in sorted(self.patterns):
            h.update(name.encode())
            h.update(np.packbits(self.patterns[name]).tobytes())
        return h.digest()


def forward(net: Network, x) -> tuple[np.ndarray, ActivationTrace]:
    """Evaluate ``F(x)`` and record each ReLU's on/off pattern.

    Zero preactivations are recorded as off.  In ``train`` batch-norm mode the
    running statistics are used (inference behaviour).
    """
    xb, single = _batched(net.config, x)
    patterns, margin = {}, [np.inf]

    def act(name, h):
        patterns[name] = h.value > 0
        if h.value.size:
            margin[0] = min(margin[0], float(np.abs(h.value).min()))
        return ag.relu(h)

    y = _Builder(net, _const_params(net), act)(xb).value
    return (y[0] if single else y), ActivationTrace(patterns, margin[0])


def preactivation_margin(net: Network, x) -> float:
    return forward(net, x)[1].margin


# ---------------------------------------------------------------------------
# linearization


def _require_frame(net: Network) -> None:
    if not net.config.frame_analyzable:
        raise FrameModeError(
            "frame analysis needs bias_free=True, skip_connections=False and "
            f"bn_mode in (off, linear_eval); got {net.config}")


@dataclass
class LinearizedOperator:
    """``J(x) = B~(x) B(x)^T`` frozen at the point ``x``."""

    net: Network
    trace: ActivationTrace
    point: np.ndarray

    @property
    def size(self) -> int:
        return self.net.config.input_size

    def _builder(self) -> _Builder:
        pats = self.trace.patterns

        def act(name, h):
            return h * pats[name].astype(np.float64)
        return _Builder(self.net, _const_params(self.net), act)

    def apply(self, v) -> np.ndarray:
        return linearized_apply(self, v)

    def encoder_apply(self, v) -> np.ndarray:
        vb, single = _batched(self.net.config, v)
        z, _ = self._builder().encode(ag.lift(vb))
        return z.value[0] if single else z.value

    def decoder_apply(self, z) -> np.ndarray:
        return self._builder().decode(ag.lift(z)).value


def freeze(net: Network, x, trace: ActivationTrace | None = None) -> LinearizedOperator:
    """Linearize ``net`` at a single input ``x`` (optionally with a given trace)."""
    _require_frame(net)
    x = tc.as_tensor(x)
    if x.shape != net.config.input_shape:
        raise tc.DimensionError(f"freeze point shape {x.shape} vs network input {net.config.input_shape}")
    if trace is None:
        trace = forward(net, x)[1]
    return LinearizedOperator(net, trace, x)


def linearized_apply(op: LinearizedOperator, v) -> np.ndarray:
    """``J(x) v``: the forward pass with every ReLU replaced by its frozen pattern."""
    vb, single = _batched(op.net.config, v)
    y = op._builder()(vb).value
    return y[0] if single else y


def _unit_batches(shape, chunk: int):
    n = int(np.prod(shape))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        e = np.zeros((stop - start, n))
        e[np.arange(stop - start), np.arange(start, stop)] = 1.0
        yield start, stop, e.reshape((stop - start,) + tuple(shape))


def jacobian_diagonal(op: LinearizedOperator, chunk: int = 256) -> np.ndarray:
    shape = op.net.config.input_shape
    n = op.size
    diag = np.empty(n)
    for start, stop, e in _unit_batches(shape, chunk):
        cols = linearized_apply(op, e).reshape(stop - start, n)
        diag[start:stop] = cols[np.arange(stop - start), np.arange(start, stop)]
    return diag


def jacobian_dense(op: LinearizedOperator, chunk: int = 256) -> np.ndarray:
    n = op.size
    if n > DENSE_LIMIT:
        raise ValueError(f"dense Jacobian of size {n} exceeds limit {DENSE_LIMIT}")
    J = np.empty((n, n))
    for start, stop, e in _unit_batches(op.net.config.input_shape, chunk):
        J[:, start:stop] = linearized_apply(op, e).reshape(stop - start, n).T
    return J


def frame_bases(op: LinearizedOperator) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``B(x)`` (n x d) and ``B~(x)`` (n x d) with ``J = B~ B^T``.

    ``d`` is the bottleneck feature dimension.  Intended for small test sizes.
    """
    cfg = op.net.config
    n = op.size
    Bt_cols = [op.encoder_apply(e).reshape(len(e), -1) for _, _, e in _unit_batches(cfg.input_shape, 256)]
    B = np.concatenate(Bt_cols, axis=0)
    d = B.shape[1]
    z_shape = op.encoder_apply(np.zeros(cfg.input_shape)).shape
    Bd = np.empty((n, d))
    for start, stop, e in _unit_batches(z_shape, 256):
        Bd[:, start:stop] = op.decoder_apply(e).reshape(stop - start, n).T
    return B, Bd


def divergence_exact(net: Network, x) -> float:
    """``Tr J(x)``, i.e. ``sum_i <b_i(x), b~_i(x)>``, from n unit-vector applications."""
    return float(jacobian_diagonal(freeze(net, x)).sum())


def divergence_hutchinson(net, x, probe_eps: float = 1e-5, n_probes: int = 1,
                          seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo divergence with Gaussian probes and a forward difference.

    ``net`` may be a :class:`Network` or any deterministic array-to-array
    callable.  Returns ``(mean, standard error)``; the error is ``inf`` for a
    single probe.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    f = net
    x = tc.as_tensor(x)
    rng = np.random.default_rng(seed)
    fx = tc.as_tensor(f(x))
    samples = np.empty(n_probes)
    for i in range(n_probes):
        b = rng.standard_normal(x.shape)
        samples[i] = float(np.vdot(b, tc.as_tensor(f(x + probe_eps * b)) - fx)) / probe_eps
    stderr = float(samples.std(ddof=1) / np.sqrt(n_probes)) if n_probes > 1 else float("inf")
    return float(samples.mean()), stderr


def local_operator(net: Network, x) -> LinearizedOperator:
    """The input Jacobian of ``net`` at ``x`` as a linear operator.

    Frame-analyzable networks are simply frozen.  A bias-free network in
    ``train`` batch-norm mode evaluates affinely (running mean subtracted);
    its Jacobian keeps the patterns of that evaluation and drops the shift.
    """
    cfg = net.config
    if cfg.frame_analyzable:
        return freeze(net, x)
    if cfg.bn_mode == "train" and cfg.bias_free and not cfg.skip_connections:
        return freeze(net.with_bn_mode("linear_eval"), x, forward(net, x)[1])
    _require_frame(net)


def jacobian_spectrum_report(net: Network, x) -> dict:
    """Singular values of ``J(x)``, ``||J J^T - I||_F / sqrt(n)`` and ``Tr J / n``.

    Also accepts bias-free networks trained with batch statistics (see
    :func:`local_operator`).
    """
    n = net.config.input_size
    if n > DENSE_LIMIT:
        raise ValueError(f"input size {n} exceeds dense limit {DENSE_LIMIT}")
    J = jacobian_dense(local_operator(net, x))
    sv = np.linalg.svd(J, compute_uv=False)
    defect = float(np.linalg.norm(J @ J.T - np.eye(n)) / np.sqrt(n))
    return {
        "singular_values": sv.tolist(),
        "orthogonality_defect": defect,
        "normalized_trace": float(np.trace(J) / n),
    }


# ---------------------------------------------------------------------------
# differentiation


class GraphNetwork:
    """Differentiable view of a :class:`Network`.

    Calling it on an array or Var builds the forward graph.  After
    ``autograd.backward`` on a loss, :meth:`grads` returns parameter
    gradients and ``batch_stats`` holds the batch-norm batch moments seen in
    training mode.
    """

    def __init__(self, net: Network, training: bool = False, requires_grad: bool = True):
        self.net = net
        self.training = training
        self.params = {k: (ag.param(v) if requires_grad else ag.lift(v)) for k, v in net.params.items()}
        self.batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, x) -> ag.Var:
        xv = ag.lift(x)
        if xv.value.shape[1:] != self.net.config.input_shape:
            raise tc.DimensionError(f"batch shape {xv.value.shape} vs network input {self.net.config.input_shape}")
        b = _Builder(self.net, self.params, lambda name, h: ag.relu(h),
                     bn_training=self.training and self.net.config.bn_mode == "train")
        y = b(xv)
        self.batch_stats.update(b.batch_stats)
        return y

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for k, v in self.params.items()}

    def updated_state(self, momentum: float = 0.1) -> dict[str, np.ndarray]:
        """Running statistics after folding in this graph's batch moments."""
        state = dict(self.net.state)
        for name, (mean, var) in self.batch_stats.items():
            state[f"{name}.bn_mean"] = (1 - momentum) * state[f"{name}.bn_mean"] + momentum * mean
            state[f"{name}.bn_var"] = (1 - momentum) * state[f"{name}.bn_var"] + momentum * var
        return state


def gradient(net: Network, loss_fn, batch, attention=None, training: bool = False) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of a scalar loss with respect to the parameters.

    ``loss_fn(F, batch)`` (or ``loss_fn(F, A, batch)`` when ``attention`` is
    given) must build its result from ``F`` (a :class:`GraphNetwork`) and the
    autograd operations.  Attention gradients are returned under ``att.*``.
    """
    G = GraphNetwork(net, training=training)
    if attention is None:
        loss = loss_fn(G, batch)
    else:
        from .attention import GraphAttention
        A = GraphAttention(attention)
        loss = loss_fn(G, A, batch)
    if not isinstance(loss, ag.Var) or loss.value.shape != ():
        raise ValueError("loss_fn must return a scalar Var built from the graph network")
    ag.backward(loss)
    grads = G.grads()
    if attention is not None:
        grads.update({f"att.{k}": v for k, v in A.grads().items()})
    return grads
