"""Command-line entry point: ``n2b {gen-data,train,infer,verify,report}``.

Noise levels given with ``--sigma`` are on the 8-bit scale (e.g. 25) and are
divided by 255 internally.  Configs and reports are JSON.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import estimators as est
from . import network as nw
from . import verify as verify_mod
from .checkpoint import load_checkpoint
from .data import KINDS, gen_synthetic_dataset
from .metrics import evaluate
from .sampling import BoostConfig
from .tensorio import read_pgm, read_tensor, write_pgm, write_tensor
from .training import (MODES, ExperimentConfig, _second_realization, evaluate_holdout, infer,
                       load_splits, train)


def _dump(obj, out: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _boost(args, base: BoostConfig | None = None) -> BoostConfig:
    b = base or BoostConfig()
    changes = {}
    if getattr(args, "k", None) is not None:
        changes["K"] = args.k
    if getattr(args, "p", None) is not None:
        changes.update(p=args.p, kind="bernoulli")
    if getattr(args, "mask_kind", None) is not None:
        changes["kind"] = args.mask_kind
    return dataclasses.replace(b, **changes)


def _experiment(args) -> ExperimentConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = ExperimentConfig.from_dict(raw)
    changes = {}
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.sigma is not None:
        changes["sigma"] = args.sigma
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.out is not None:
        changes["out"] = str(args.out)
    changes["boost"] = _boost(args, cfg.boost)
    return dataclasses.replace(cfg, **changes)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    size = tuple(args.size)
    sigma = None if args.sigma is None else args.sigma / 255.0
    data = gen_synthetic_dataset(args.kind, size, args.count, args.seed, sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "inputs.n2bt", data.inputs)
    write_tensor(out / "clean.n2bt", data.clean)
    if sigma is not None:
        write_tensor(out / "targets.n2bt", _second_realization(data.clean, sigma, args.seed))
    if args.pgm:
        (out / "pgm").mkdir(exist_ok=True)
        for i, x in enumerate(data.inputs):
            write_pgm(out / "pgm" / f"{i:05d}.pgm", x[0])
    _dump({"kind": args.kind, "size": list(size), "count": args.count, "seed": args.seed,
           "sigma": args.sigma, "out": str(out)}, None)
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    result = train(cfg)
    last = result.history[-1] if result.history else {}
    _dump({"mode": cfg.mode, "epochs": len(result.history), "final": last, "out": cfg.out}, None)
    return 0


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)[None]
    return read_tensor(path)


def _write_image(path: Path, y: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pgm":
        if y.ndim != 3 or y.shape[0] != 1:
            raise ValueError(f"PGM output needs a single-channel image, got shape {y.shape}")
        write_pgm(path, y[0])
    else:
        write_tensor(path, y)


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    boost = _boost(args, BoostConfig(K=1, p=1.0) if args.k is None else BoostConfig(K=args.k))
    if args.seed is not None:
        boost = dataclasses.replace(boost, base_seed=args.seed)
    x = _read_image(Path(args.input))
    y = infer(ckpt, x, boost, args.aggregation)
    _write_image(Path(args.out), y)
    _dump({"input": args.input, "output": str(args.out), "aggregation": args.aggregation,
           "boost": dataclasses.asdict(boost)}, None)
    return 0


def cmd_verify(args) -> int:
    report = verify_mod.run(args.suite, 0 if args.seed is None else args.seed)
    text = verify_mod.dumps(report)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return 0 if report["passed"] else 1


def cmd_report(args) -> int:
    """Summarise a training run: history, held-out metrics and a SURE estimate."""
    run = Path(args.run)
    cfg = ExperimentConfig.from_dict(json.loads((run / "config.json").read_text()))
    history = json.loads((run / "history.json").read_text())
    ckpt = load_checkpoint(run / "checkpoint")
    boost = _boost(args, cfg.boost)
    held = load_splits(dataclasses.replace(cfg, dataset={**cfg.dataset, "count": 0})).holdout
    metrics = {"noisy": evaluate(held.inputs, held.clean).summary() if held.P else None,
               "single": evaluate_holdout(ckpt, held, BoostConfig(K=1, p=1.0)).summary()}
    if cfg.mode in ("n2v", "n2b-joint", "n2b-twostage"):
        metrics["mean"] = evaluate_holdout(ckpt, held, boost, "mean").summary()
    if ckpt.attention is not None and ckpt.attention.K == boost.K:
        metrics["attention"] = evaluate_holdout(ckpt, held, boost, "attention").summary()
    sure = None
    if held.P:
        method = "exact" if ckpt.net.config.frame_analyzable else "hutchinson"
        sure = est.sure_point(held.inputs[0], ckpt.net, cfg.sigma_unit, method).to_dict()
    out = {"config": cfg.to_dict(), "history": history, "metrics": metrics, "sure_first_holdout": sure}
    _dump(out, None if args.out is None else Path(args.out))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="n2b", description=__doc__.split("\n\n")[0],
                                epilog="--sigma is on the 8-bit scale (0..255); it is divided by 255.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as N2BT tensors")
    g.add_argument("--kind", choices=KINDS, default="mixed")
    g.add_argument("--size", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigma", type=float, default=None, help="noise level on the 8-bit scale")
    g.add_argument("--pgm", action="store_true", help="also write the noisy inputs as PGM files")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--config", help="ExperimentConfig JSON")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--sigma", type=float, help="noise level on the 8-bit scale")
    t.add_argument("--epochs", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--p", type=float)
    t.add_argument("--mask-kind", choices=("bernoulli", "weights"))
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="denoise one image (PGM) or tensor (N2BT)")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--aggregation", choices=("mean", "attention"), default="mean")
    i.add_argument("--k", type=int)
    i.add_argument("--p", type=float)
    i.add_argument("--mask-kind", choices=("bernoulli", "weights"))
    i.add_argument("--seed", type=int, help="mask seed")
    i.set_defaults(fn=cmd_infer)

    v = sub.add_parser("verify", help="run the numerical property suites")
    v.add_argument("--suite", choices=("all",) + verify_mod.SUITES, default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    r = sub.add_parser("report", help="summarise a training run directory")
    r.add_argument("--run", required=True, help="the --out directory of a train command")
    r.add_argument("--k", type=int)
    r.add_argument("--p", type=float)
    r.add_argument("--mask-kind", choices=("bernoulli", "weights"))
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
