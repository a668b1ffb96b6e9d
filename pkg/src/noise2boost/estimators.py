"""Prediction-error estimators and the training losses built on them.

Conventions: an input ``x`` is one signal of the network's input shape; a
``Dataset`` stacks P of them.  A *model* is a :class:`~noise2boost.network.Network`,
a :class:`LinearDenoiser`, or any deterministic array-to-array callable (the
latter only supports Monte-Carlo divergence).  Masks are
:class:`~noise2boost.sampling.MaskPattern` objects or plain arrays shaped like
``x``; a masked evaluation ``F(x, L)`` means ``F(x * L)`` and its divergence is
taken with respect to ``x``.

Functions suffixed ``_graph`` build differentiable scalar losses on a batch for
training; they average over the batch in the same way the numeric versions
average over the dataset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import network as nw
from . import tensor_core as tc
from .attention import AttentionNet, GraphAttention
from .sampling import MaskPattern

DIV_METHODS = ("exact", "hutchinson", "pn_constant", "omitted")


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    mu: np.ndarray | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray | None = None
    clean: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = tc.as_tensor(self.inputs)
        shape = self.inputs.shape[1:]
        for name in ("targets", "clean"):
            arr = getattr(self, name)
            if arr is not None:
                arr = tc.as_tensor(arr)
                if arr.shape[1:] != shape:
                    raise tc.DimensionError(f"{name} shape {arr.shape} vs inputs {self.inputs.shape}")
                setattr(self, name, arr)

    @property
    def P(self) -> int:
        return self.inputs.shape[0]

    @property
    def Q(self) -> int:
        return 0 if self.targets is None else self.targets.shape[0]

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.inputs[idx], pick(self.targets), pick(self.clean))


@dataclass
class EstimatorReport:
    method: str
    fidelity: float
    divergence: float
    divergence_method: str
    sigma: float
    total: float
    seed: int | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _report(method, fidelity, divergence, div_method, sigma, seed=None, **config) -> EstimatorReport:
    total = fidelity if div_method == "omitted" else fidelity + 2.0 * sigma ** 2 * divergence
    return EstimatorReport(method, float(fidelity), float(divergence), div_method, float(sigma),
                           float(total), seed, config)


@dataclass
class LinearDenoiser:
    """``F(x) = A x`` on flattened signals of ``shape``."""

    matrix: np.ndarray
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.matrix = tc.as_tensor(self.matrix)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise tc.DimensionError(f"matrix must be square, got {self.matrix.shape}")
        if self.shape is None:
            self.shape = (n,)
        self.shape = tuple(self.shape)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = tc.as_tensor(x)
        lead = x.shape[:x.ndim - len(self.shape)]
        if x.shape[len(lead):] != self.shape:
            raise tc.DimensionError(f"input shape {x.shape} vs linear map on {self.shape}")
        return (x.reshape(-1, self.n) @ self.matrix.T).reshape(x.shape)

    def divergence(self, mask=None) -> float:
        d = np.diag(self.matrix)
        return float(d.sum() if mask is None else (d * np.ravel(mask)).sum())


def circulant_smoother(n: int, taps) -> LinearDenoiser:
    """Dense circulant matrix of a centered 1-D kernel, assembled column by column."""
    k = tc.as_tensor(taps)
    cols = [tc.periodic_conv(np.eye(n)[j][None], k[None, None]).ravel() for j in range(n)]
    return LinearDenoiser(np.stack(cols, axis=1))


def _mask_values(L) -> np.ndarray | None:
    if L is None:
        return None
    return L.values if isinstance(L, MaskPattern) else tc.as_tensor(L)


def _mask_mean(L) -> float:
    if L is None:
        return 1.0
    return L.p if isinstance(L, MaskPattern) else float(np.mean(L))


def _masked_apply(model, x, L=None) -> np.ndarray:
    v = _mask_values(L)
    if v is not None:
        tc.check_same_shape(x, v, "mask")
    return tc.as_tensor(model(x if v is None else x * v))


def _masked_divergence(model, x, L, method, probe_eps=1e-5, n_probes=16, seed=0) -> float:
    v = _mask_values(L)
    if method == "omitted":
        return 0.0
    if method == "pn_constant":
        return _mask_mean(L) * x.size
    if method == "hutchinson":
        f = (lambda z: model(z * v)) if v is not None else model
        return nw.divergence_hutchinson(f, x, probe_eps, n_probes, seed)[0]
    if method != "exact":
        raise ValueError(f"unknown divergence method {method!r}; expected one of {DIV_METHODS}")
    if isinstance(model, LinearDenoiser):
        return model.divergence(v)
    if isinstance(model, nw.Network):
        if v is None:
            return nw.divergence_exact(model, x)
        diag = nw.jacobian_diagonal(nw.freeze(model, x * v))
        return float((diag * v.ravel()).sum())
    raise nw.FrameModeError("exact divergence needs a Network or LinearDenoiser")


def masked_divergences(net: nw.Network, x, masks) -> np.ndarray:
    """Exact divergence of ``x -> F(x * L_k)`` for each mask.

    Jacobian diagonals are cached by activation pattern, since ``J`` only
    depends on which ReLUs fire.
    """
    x = tc.as_tensor(x)
    cache: dict[bytes, np.ndarray] = {}
    out = np.empty(len(masks))
    for k, L in enumerate(masks):
        v = _mask_values(L)
        xm = x * v
        trace = nw.forward(net, xm)[1]
        key = trace.key()
        if key not in cache:
            cache[key] = nw.jacobian_diagonal(nw.freeze(net, xm, trace))
        out[k] = float((cache[key] * v.ravel()).sum())
    return out


# ---------------------------------------------------------------------------
# numeric estimators


def err_hat(x_star, y) -> float:
    x_star, y = tc.as_tensor(x_star), tc.as_tensor(y)
    tc.check_same_shape(x_star, y, "err_hat")
    return float(np.sum((x_star - y) ** 2))


def loss_n2n(data: Dataset, net) -> float:
    if data.targets is None or data.Q == 0:
        raise ValueError("Noise2Noise loss needs target samples")
    Y = _masked_apply(net, data.inputs)
    total = sum(float(np.sum((data.targets - y[None]) ** 2)) for y in Y)
    return total / (data.P * data.Q)


def _sure(x, net, L, sigma, div_method, tag, div_kw) -> EstimatorReport:
    x = tc.as_tensor(x)
    fid = err_hat(x, _masked_apply(net, x, L))
    div = _masked_divergence(net, x, L, div_method, **div_kw)
    return _report(tag, fid, div, div_method, sigma, div_kw.get("seed"))


def sure_point(x, net, sigma: float, div_method: str = "exact", **div_kw) -> EstimatorReport:
    """``||x - F(x)||^2 + 2 sigma^2 div F(x)``."""
    return _sure(x, net, None, sigma, div_method, "sure", div_kw)


def sure_masked(x, net, L, sigma: float, div_method: str = "exact", **div_kw) -> EstimatorReport:
    """``||x - F(x, L)||^2 + 2 sigma^2 div_x F(x, L)`` for one fixed mask."""
    return _sure(x, net, L, sigma, div_method, "sure_masked", div_kw)


def loss_sure(data: Dataset, net, sigma: float, div_method: str = "exact", **div_kw) -> float:
    if data.P < 1:
        raise ValueError("empty dataset")
    return float(np.mean([sure_point(x, net, sigma, div_method, **div_kw).total for x in data.inputs]))


def loss_n2v(data: Dataset, masks, net, sigma: float = 0.0, include_divergence: bool = False,
             div_method: str = "exact", **div_kw) -> float:
    """Average over inputs and masks of the masked fidelity (plus the divergence
    penalty when ``include_divergence``)."""
    if len(masks) < 1:
        raise ValueError("need at least one mask")
    terms = []
    for x in data.inputs:
        for L in masks:
            if include_divergence:
                terms.append(sure_masked(x, net, L, sigma, div_method, **div_kw).total)
            else:
                terms.append(err_hat(x, _masked_apply(net, x, L)))
    return float(np.mean(terms))


def bagged_mean(net, x, masks) -> np.ndarray:
    if len(masks) < 1:
        raise ValueError("need at least one mask")
    x = tc.as_tensor(x)
    stack = np.stack([x * _mask_values(L) for L in masks])
    return _masked_apply(net, stack).mean(axis=0)


def boosting_point(x, net, masks, sigma: float, div_method: str = "exact") -> EstimatorReport:
    """``||x - mean_k F(x, L_k)||^2 + 2 sigma^2 div mean_k F(x, L_k)``.

    ``pn_constant`` replaces the divergence by ``p * n`` with ``p`` the mask mean.
    """
    x = tc.as_tensor(x)
    fid = err_hat(x, bagged_mean(net, x, masks))
    if div_method == "exact":
        if isinstance(net, LinearDenoiser):
            div = float(np.mean([net.divergence(_mask_values(L)) for L in masks]))
        else:
            div = float(masked_divergences(net, x, masks).mean())
    elif div_method == "pn_constant":
        div = float(np.mean([_mask_mean(L) for L in masks])) * x.size
    else:
        raise ValueError(f"boosting loss supports exact or pn_constant, got {div_method!r}")
    return _report("boosting", fid, div, div_method, sigma, K=len(masks))


def loss_boosting(data: Dataset, net, masks, sigma: float, div_method: str = "exact") -> float:
    return float(np.mean([boosting_point(x, net, masks, sigma, div_method).total for x in data.inputs]))


def loss_n2b(data: Dataset, net, attention: AttentionNet, masks) -> float:
    """Attention-weighted boosting fidelity, averaged over inputs."""
    K = len(masks)
    if attention.K != K:
        raise tc.DimensionError(f"attention network has K={attention.K}, got {K} masks")
    M = np.stack([_mask_values(L) for L in masks])
    F = nw.GraphNetwork(net, requires_grad=False) if isinstance(net, nw.Network) else None
    A = GraphAttention(attention, requires_grad=False)
    if F is not None:
        return float(n2b_graph(F, A, data.inputs, data.inputs, M).value)
    terms = []
    for x in data.inputs:
        branches = np.stack([_masked_apply(net, x, m) for m in M])
        agg = A.aggregate(branches[None]).value[0]
        terms.append(err_hat(x, agg))
    return float(np.mean(terms))


def closed_form_prediction_error(A, mu, sigma: float) -> float:
    """``E||x* - A x||^2 = ||(I - A) mu||^2 + n sigma^2 + sigma^2 ||A||_F^2``."""
    A = A.matrix if isinstance(A, LinearDenoiser) else tc.as_tensor(A)
    mu = tc.as_tensor(mu).ravel()
    r = mu - A @ mu
    return float(r @ r + mu.size * sigma ** 2 + sigma ** 2 * np.sum(A ** 2))


def oracle_prediction_error(model, noise: NoiseModel, trials: int = 1000, seed: int = 0,
                            closed_form: bool = True) -> tuple[float, float]:
    """Ground-truth ``E||x* - F(x)||^2`` for ``x, x* = mu + N(0, sigma^2 I)``.

    Linear maps return the closed form with zero standard error unless
    ``closed_form=False``; everything else is Monte Carlo.
    """
    if noise.mu is None:
        raise ValueError("the oracle needs the clean mean mu")
    mu = tc.as_tensor(noise.mu)
    if closed_form and isinstance(model, (LinearDenoiser, np.ndarray)):
        return closed_form_prediction_error(model, mu, noise.sigma), 0.0
    if isinstance(model, np.ndarray):
        model = LinearDenoiser(model, mu.shape)
    rng = np.random.default_rng(seed)
    x = mu + noise.sigma * rng.standard_normal((trials,) + mu.shape)
    xs = mu + noise.sigma * rng.standard_normal((trials,) + mu.shape)
    y = tc.as_tensor(model(x))
    errs = np.sum((xs - y).reshape(trials, -1) ** 2, axis=1)
    return float(errs.mean()), float(errs.std(ddof=1) / np.sqrt(trials))


# ---------------------------------------------------------------------------
# differentiable training losses (batch-averaged)


def _sq_err(a, b) -> ag.Var:
    """Per-sample squared error summed, averaged over the leading batch axis."""
    d = ag.lift(a) - ag.lift(b)
    return ag.mul(ag.reduce_sum(ag.square(d)), 1.0 / d.value.shape[0])


def fidelity_graph(F, x, target) -> ag.Var:
    return _sq_err(target, F(x))


def sure_graph(F, x, sigma: float, probe_eps: float, rng: np.random.Generator) -> ag.Var:
    """Monte-Carlo SURE with one Gaussian probe per sample."""
    x = tc.as_tensor(x)
    b = rng.standard_normal(x.shape)
    y = F(x)
    yp = F(x + probe_eps * b)
    div = ag.mul(ag.reduce_sum((yp - y) * b), 1.0 / (probe_eps * x.shape[0]))
    return _sq_err(x, y) + ag.mul(div, 2.0 * sigma ** 2)


def _branches(F, x, masks) -> ag.Var:
    """Outputs ``F(x_b * L_{b,k})`` as a ``(B, K, ...)`` Var."""
    x = tc.as_tensor(x)
    masks = tc.as_tensor(masks)
    if masks.ndim == x.ndim:
        masks = np.broadcast_to(masks[None], (x.shape[0],) + masks.shape)
    B, K = masks.shape[:2]
    xin = (x[:, None] * masks).reshape((B * K,) + x.shape[1:])
    return ag.reshape(F(xin), (B, K) + x.shape[1:])


def n2v_graph(F, x, masks, target=None, sigma: float = 0.0, include_divergence: bool = False,
              probe_eps: float = 1e-3, rng=None) -> ag.Var:
    x = tc.as_tensor(x)
    target = x if target is None else tc.as_tensor(target)
    Y = _branches(F, x, masks)
    K = Y.shape[1]
    loss = ag.mul(_sq_err(target[:, None], Y), 1.0 / K)
    if include_divergence:
        masks = tc.as_tensor(masks)
        b = rng.standard_normal(x.shape)
        Yp = _branches(F, x + probe_eps * b, masks)
        div = ag.reduce_sum((Yp - Y) * b[:, None]) * (1.0 / (probe_eps * x.shape[0] * K))
        loss = loss + ag.mul(div, 2.0 * sigma ** 2)
    return loss


def boosting_graph(F, x, masks, sigma: float, p: float) -> ag.Var:
    """Boosting loss with the divergence replaced by the constant ``p * n``."""
    x = tc.as_tensor(x)
    Y = _branches(F, x, masks)
    bag = ag.mul(ag.reduce_sum(Y, axis=1), 1.0 / Y.shape[1])
    n = int(np.prod(x.shape[1:]))
    return _sq_err(x, bag) + 2.0 * sigma ** 2 * p * n


def n2b_graph(F, A: GraphAttention, x_in, target, masks, branches: ag.Var | None = None) -> ag.Var:
    """``||target - sum_k w_k F(x_in * L_k)||^2`` averaged over the batch.

    Pass precomputed ``branches`` to treat the regression outputs as constants.
    """
    Y = _branches(F, x_in, masks) if branches is None else branches
    return _sq_err(target, A.aggregate(Y))
