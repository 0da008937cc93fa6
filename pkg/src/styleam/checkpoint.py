"""Checkpoint container.

Layout::

    8 bytes   magic b"STYLEAM\\x01"
    8 bytes   little-endian uint64: manifest length in bytes
    N bytes   UTF-8 JSON manifest
    rest      little-endian float32 payload, tensors concatenated in manifest order

The manifest records format version, mode, stage widths, one entry per tensor
(name, shape, original dtype, byte offset, byte count), training epoch and
phase, the config and its digest, optimizer hyperparameters and the numpy
bit-generator state of the training rng.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import StyleAMError

MAGIC = b"STYLEAM\x01"
FORMAT_VERSION = 1


class CheckpointError(StyleAMError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    mode: str
    stage_widths: list[int]
    epoch: int = 0
    phase: str = "init"
    config: dict = field(default_factory=dict)
    config_digest: str = ""
    alignment_space: str = "style"
    optimizer: dict | None = None  # {"param_groups": [...], "state_keys": {...}}
    rng_state: dict | None = None

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model.") :]: v for k, v in self.tensors.items() if k.startswith("model.")}


def _np_dtype_ok(t: torch.Tensor):
    if t.is_complex():
        raise CheckpointError("complex tensors are not supported")


def save_checkpoint(path, ckpt: Checkpoint):
    entries = []
    chunks = []
    offset = 0
    for name, t in ckpt.tensors.items():
        _np_dtype_ok(t)
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": str(t.dtype).replace("torch.", ""),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "mode": ckpt.mode,
        "stage_widths": list(ckpt.stage_widths),
        "alignment_space": ckpt.alignment_space,
        "epoch": ckpt.epoch,
        "phase": ckpt.phase,
        "config_digest": ckpt.config_digest,
        "config": ckpt.config,
        "optimizer": ckpt.optimizer,
        "rng_state": ckpt.rng_state,
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_manifest(path) -> tuple[dict, int]:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest, len(MAGIC) + 8 + n


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    manifest, start = read_manifest(path)
    payload = path.read_bytes()[start:]
    tensors = {}
    for e in manifest["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of payload")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, e["dtype"]))
    return Checkpoint(
        tensors=tensors,
        mode=manifest["mode"],
        stage_widths=manifest["stage_widths"],
        epoch=manifest["epoch"],
        phase=manifest["phase"],
        config=manifest.get("config") or {},
        config_digest=manifest.get("config_digest", ""),
        alignment_space=manifest.get("alignment_space", "style"),
        optimizer=manifest.get("optimizer"),
        rng_state=manifest.get("rng_state"),
    )


# --------------------------------------------------------------------------
# model / optimizer <-> checkpoint


def pack_training_state(model, optimizer=None, rng: np.random.Generator | None = None, **meta) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        keys = {}
        for idx, st in sd["state"].items():
            keys[str(idx)] = sorted(st)
            for k in st:
                v = st[k]
                tensors[f"optim.{idx}.{k}"] = v if torch.is_tensor(v) else torch.tensor(float(v))
        opt_meta = {"param_groups": sd["param_groups"], "state_keys": keys}
    return Checkpoint(
        tensors=tensors,
        mode=model.mode,
        stage_widths=list(model.backbone.widths),
        alignment_space=model.alignment_space,
        optimizer=opt_meta,
        rng_state=rng.bit_generator.state if rng is not None else None,
        **meta,
    )


def restore_optimizer(optimizer, ckpt: Checkpoint):
    if ckpt.optimizer is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    state = {}
    for idx, keys in ckpt.optimizer["state_keys"].items():
        state[int(idx)] = {k: ckpt.tensors[f"optim.{idx}.{k}"].clone() for k in keys}
    optimizer.load_state_dict({"state": state, "param_groups": ckpt.optimizer["param_groups"]})


def restore_rng(ckpt: Checkpoint) -> np.random.Generator:
    if ckpt.rng_state is None:
        raise CheckpointError("checkpoint carries no rng state")
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return rng
