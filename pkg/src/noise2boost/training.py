"""Training loops for the six regimes and mask-aggregated inference.

Noise levels in :class:`ExperimentConfig` are on the 8-bit scale (0..255) and
divided by 255 before use; images live in [0, 1].
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import estimators as est
from . import tensor_core as tc
from .attention import HIDDEN, AttentionNet, GraphAttention, init_attention
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import gen_synthetic_dataset
from .metrics import MetricsRecord, evaluate
from .network import GraphNetwork, Network, NetworkConfig, init_network
from .sampling import BoostConfig, draw_masks, noise_augment, stream
from .tensorio import read_tensor

MODES = ("supervised", "n2n", "sure", "n2v", "n2b-joint", "n2b-twostage")
BOOST_MODES = ("n2b-joint", "n2b-twostage")


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "n2b-joint"
    network: NetworkConfig = NetworkConfig()
    boost: BoostConfig = BoostConfig()
    sigma: float = 25.0
    epochs: int = 10
    attention_epochs: int = 5
    batch_size: int = 8
    lr: float = 3e-4
    lr_halve_every: int = 50
    lr_floor: float = 1e-5
    augment: bool | None = None
    augment_sigma: tuple[float, float] = (10.0, 40.0)
    probe_eps: float = 1e-3
    dataset: dict = field(default_factory=lambda: {"kind": "mixed", "count": 2000, "holdout": 50})
    data_seed: int = 0
    seed: int = 0
    eval_every: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sigma is None or self.sigma <= 0:
            raise ValueError(f"mode {self.mode} needs a positive noise level sigma")
        if self.epochs < 0 or self.attention_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.network.bn_mode == "train" and self.batch_size < 2 and self.mode not in BOOST_MODES:
            raise ValueError("batch-norm training needs batch_size >= 2")

    @property
    def sigma_unit(self) -> float:
        return self.sigma / 255.0

    @property
    def uses_augmentation(self) -> bool:
        return self.mode in BOOST_MODES if self.augment is None else bool(self.augment)

    def lr_at(self, epoch: int) -> float:
        return max(self.lr * 0.5 ** (epoch // self.lr_halve_every), self.lr_floor)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"] = self.network.to_dict()
        d["augment_sigma"] = list(self.augment_sigma)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "network" in d:
            d["network"] = NetworkConfig.from_dict({**NetworkConfig().to_dict(), **d["network"]})
        if "boost" in d:
            d["boost"] = BoostConfig(**d["boost"])
        if "augment_sigma" in d:
            d["augment_sigma"] = tuple(d["augment_sigma"])
        if "dataset" in d:
            d["dataset"] = {**cls().dataset, **d["dataset"]}
        return cls(**d)


@dataclass
class TrainResult:
    net: Network
    attention: AttentionNet | None
    history: list[dict]
    config: ExperimentConfig
    final_metrics: MetricsRecord | None = None

    @property
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.net, self.attention, self.config.seed,
                          {"mode": self.config.mode, "boost": dataclasses.asdict(self.config.boost)})


# ---------------------------------------------------------------------------
# data


@dataclass
class Splits:
    train: est.Dataset
    holdout: est.Dataset


def _second_realization(clean: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    return np.stack([c + sigma * stream(seed, 2 << 20, i).standard_normal(c.shape)
                     for i, c in enumerate(clean)]) if len(clean) else clean.copy()


def load_splits(cfg: ExperimentConfig) -> Splits:
    """Noisy training images (with a second noisy copy as targets) and a held-out set."""
    ds = cfg.dataset
    holdout = int(ds.get("holdout", 0))
    if "path" in ds:
        root = Path(ds["path"])
        inputs = read_tensor(root / "inputs.n2bt")
        clean = read_tensor(root / "clean.n2bt") if (root / "clean.n2bt").exists() else None
        targets = read_tensor(root / "targets.n2bt") if (root / "targets.n2bt").exists() else None
        full = est.Dataset(inputs, targets, clean)
        split = full.P - holdout
        return Splits(full.subset(slice(0, split)), full.subset(slice(split, None)))
    size = cfg.network.spatial
    s = cfg.sigma_unit
    train = gen_synthetic_dataset(ds["kind"], size, int(ds["count"]), cfg.data_seed, sigma=s)
    train.targets = _second_realization(train.clean, s, cfg.data_seed)
    held = gen_synthetic_dataset(ds["kind"], size, holdout, cfg.data_seed + 1_000_003, sigma=s)
    return Splits(train, held)


# ---------------------------------------------------------------------------
# inference


def _mask_stack(boost: BoostConfig, shape, seed: int | None = None) -> np.ndarray:
    return np.stack([m.values for m in draw_masks(boost, shape, seed)])


def branch_outputs(net: Network, x, masks) -> np.ndarray:
    """``F(x * L_k)`` for a batch ``(B, ...)`` and masks ``(K, ...)``; returns ``(B, K, ...)``."""
    x = tc.as_tensor(x)
    B, K = x.shape[0], masks.shape[0]
    y = net((x[:, None] * masks[None]).reshape((B * K,) + x.shape[1:]))
    return y.reshape((B, K) + x.shape[1:])


def infer(checkpoint, x, boost: BoostConfig | None = None, aggregation: str = "mean",
          chunk: int = 64) -> np.ndarray:
    """Denoise ``x`` (one image or a batch) by aggregating K masked branches.

    ``checkpoint`` is a :class:`Checkpoint` or a checkpoint directory.  The
    masks come from ``boost.base_seed`` and are shared by all images.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    boost = boost or BoostConfig(K=1, p=1.0)
    if aggregation not in ("mean", "attention"):
        raise ValueError(f"aggregation must be 'mean' or 'attention', got {aggregation!r}")
    if aggregation == "attention":
        if ckpt.attention is None:
            raise ValueError("checkpoint has no attention network")
        if ckpt.attention.K != boost.K:
            raise tc.DimensionError(f"attention network expects K={ckpt.attention.K}, got K={boost.K}")
    x = tc.as_tensor(x)
    shape = ckpt.net.config.input_shape
    single = x.shape == shape
    xb = x[None] if single else x
    if xb.shape[1:] != shape:
        raise tc.DimensionError(f"input shape {x.shape} does not match network input {shape}")
    masks = _mask_stack(boost, shape)
    out = []
    step = max(1, chunk // boost.K)
    for start in range(0, len(xb), step):
        Y = branch_outputs(ckpt.net, xb[start:start + step], masks)
        if aggregation == "mean":
            out.append(Y.mean(axis=1))
        else:
            out.append(GraphAttention(ckpt.attention, requires_grad=False).aggregate(Y).value)
    y = np.concatenate(out) if out else np.zeros_like(xb)
    return y[0] if single else y


def evaluate_holdout(result_or_ckpt, holdout: est.Dataset, boost: BoostConfig,
                     aggregation: str = "mean") -> MetricsRecord:
    ckpt = result_or_ckpt.checkpoint if isinstance(result_or_ckpt, TrainResult) else result_or_ckpt
    if holdout.P == 0:
        return MetricsRecord()
    y = infer(ckpt, holdout.inputs, boost, aggregation)
    return evaluate(y, holdout.clean)


# ---------------------------------------------------------------------------
# training


def _step_masks(boost: BoostConfig, batch_shape, seed: int, step: int) -> np.ndarray:
    """Fresh ``(B, K, ...)`` masks for one optimisation step."""
    key = int(np.random.SeedSequence([seed, 7, step]).generate_state(1)[0])
    return np.moveaxis(_mask_stack(boost, batch_shape, key), 0, 1)


def _loss(cfg: ExperimentConfig, stage: str, G: GraphNetwork, A: GraphAttention | None,
          batch: est.Dataset, rng: np.random.Generator, step: int):
    x = batch.inputs
    s = cfg.sigma_unit
    if cfg.uses_augmentation:
        lo, hi = cfg.augment_sigma
        x_in = np.stack([noise_augment(xi, lo / 255, hi / 255, rng) for xi in x])
    else:
        x_in = x
    mode = cfg.mode
    if mode == "supervised":
        return est.fidelity_graph(G, x_in, batch.clean)
    if mode == "n2n":
        return est.fidelity_graph(G, x_in, batch.targets)
    if mode == "sure":
        return est.sure_graph(G, x_in, s, cfg.probe_eps, rng)
    masks = _step_masks(cfg.boost, x.shape, cfg.seed, step)
    if mode == "n2v" or stage == "regression":
        return est.n2v_graph(G, x_in, masks, target=x)
    if stage == "attention":
        Y = ag.lift(est._branches(G, x_in, masks).value)
        return est.n2b_graph(G, A, x_in, x, masks, branches=Y)
    return est.n2b_graph(G, A, x_in, x, masks)


def _check_finite(value: float, epoch: int, step: int, stage: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"loss became {value} at epoch {epoch}, step {step} ({stage} stage); "
            "try a smaller learning rate")


def _run_stage(cfg, stage, epochs, net, att, train, holdout, history, step0):
    """Optimise the parameters owned by ``stage`` for ``epochs`` epochs."""
    train_theta = stage in ("regression", "joint")
    train_xi = stage in ("attention", "joint")
    params = {}
    if train_theta:
        params.update(net.params)
    if train_xi:
        params.update({f"att.{k}": v for k, v in att.params.items()})
    adam = tc.AdamState({k: np.zeros_like(v) for k, v in params.items()},
                        {k: np.zeros_like(v) for k, v in params.items()}, 0)
    order_rng = stream(cfg.seed, 1, len(history))
    step = step0
    for epoch in range(epochs):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(train.P)
        losses = []
        for start in range(0, train.P, cfg.batch_size):
            idx = np.sort(perm[start:start + cfg.batch_size])
            batch = train.subset(idx)
            rng = stream(cfg.seed, 2, step)
            G = GraphNetwork(net, training=train_theta, requires_grad=train_theta)
            A = GraphAttention(att, requires_grad=train_xi) if att is not None else None
            loss = _loss(cfg, stage, G, A, batch, rng, step)
            _check_finite(float(loss.value), epoch, step, stage)
            ag.backward(loss)
            grads = {}
            if train_theta:
                grads.update(G.grads())
            if train_xi:
                grads.update({f"att.{k}": v for k, v in A.grads().items()})
            params, adam = tc.adam_step(params, grads, adam, lr)
            state = G.updated_state() if net.config.bn_mode == "train" else net.state
            net = Network(net.config, {k: params[k] for k in net.params} if train_theta else net.params,
                          state)
            if train_xi:
                att = AttentionNet.from_params({k[4:]: v for k, v in params.items() if k.startswith("att.")})
            losses.append(float(loss.value))
            step += 1
        record = {"stage": stage, "epoch": epoch, "lr": lr,
                  "loss": float(np.mean(losses)) if losses else math.nan}
        if holdout.P and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            agg = "attention" if att is not None and stage != "regression" else "mean"
            boost = cfg.boost if cfg.mode in BOOST_MODES or cfg.mode == "n2v" else None
            m = evaluate_holdout(Checkpoint(net, att), holdout, boost, agg)
            record.update(psnr=m.mean_psnr, ssim=m.mean_ssim)
        history.append(record)
    return net, att, step


def train(cfg: ExperimentConfig, splits: Splits | None = None) -> TrainResult:
    """Train according to ``cfg.mode``; deterministic given the config and seeds."""
    splits = splits or load_splits(cfg)
    if cfg.mode == "n2n" and splits.train.targets is None:
        raise ValueError("n2n training needs target images")
    if cfg.mode == "supervised" and splits.train.clean is None:
        raise ValueError("supervised training needs clean images")
    net = init_network(cfg.network, cfg.seed)
    att = init_attention(cfg.boost.K, HIDDEN, cfg.seed + 1) if cfg.mode in BOOST_MODES else None
    history: list[dict] = []
    if cfg.mode == "n2b-twostage":
        net, att, step = _run_stage(cfg, "regression", cfg.epochs, net, att, splits.train,
                                    splits.holdout, history, 0)
        net, att, _ = _run_stage(cfg, "attention", cfg.attention_epochs, net, att, splits.train,
                                 splits.holdout, history, step)
    else:
        stage = "joint" if cfg.mode == "n2b-joint" else "regression"
        net, att, _ = _run_stage(cfg, stage, cfg.epochs, net, att, splits.train, splits.holdout,
                                 history, 0)
    result = TrainResult(net, att, history, cfg)
    if cfg.out:
        out = Path(cfg.out)
        save_checkpoint(out / "checkpoint", result.checkpoint)
        (out / "history.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return result
