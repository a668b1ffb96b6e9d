"""Checkpoint directories: one N2BT file per tensor plus ``manifest.json``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionNet
from .network import Network, NetworkConfig
from .tensorio import read_tensor, write_tensor

MANIFEST = "manifest.json"
FORMAT = "n2b-checkpoint/1"


@dataclass
class Checkpoint:
    net: Network
    attention: AttentionNet | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def _write_group(root: Path, prefix: str, tensors: dict) -> dict[str, str]:
    files = {}
    for name in sorted(tensors):
        fname = f"{prefix}.{name}.n2bt"
        write_tensor(root / fname, tensors[name])
        files[name] = fname
    return files


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "config": ckpt.net.config.to_dict(),
        "tensors": _write_group(root, "theta", ckpt.net.params),
        "state": _write_group(root, "state", ckpt.net.state),
        "seed": ckpt.seed,
        "attention": None if ckpt.attention is None
        else _write_group(root, "xi", ckpt.attention.params),
        "meta": ckpt.meta,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{root}: unsupported checkpoint format {manifest.get('format')!r}")
    load = lambda files: {k: read_tensor(root / f) for k, f in files.items()}
    net = Network(NetworkConfig.from_dict(manifest["config"]), load(manifest["tensors"]),
                  load(manifest["state"]))
    att = manifest.get("attention")
    return Checkpoint(net, None if att is None else AttentionNet.from_params(load(att)),
                      manifest.get("seed"), manifest.get("meta", {}))
