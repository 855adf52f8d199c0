"""Single-file checkpoint container.

Layout: an 8-byte magic string, a little-endian u32 format version, a
little-endian u64 header length, a JSON header, then raw little-endian
float32 blob data. The header records the completed-epoch count, the full
training config snapshot, per-parameter optimizer step counts, and a blob
index (name, shape, dtype, offset, nbytes). Blobs cover every parameter
and buffer plus the Adam first/second-moment tensors, so resuming
reproduces the continued run bit for bit on the same platform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError
from .network import ArchitectureConfig, KglNet

MAGIC = b"KGLNETCK"
VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    config: dict  # training config snapshot (plain JSON types)
    metric_only: bool
    blobs: dict
    optimizer_steps: dict
    path: Path | None = None

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig.from_dict(self.config.get("architecture", {}))

    def build_network(self) -> KglNet:
        """Reconstruct the network and load its weights (no optimizer)."""
        net = KglNet(
            self.architecture(),
            seed=int(self.config.get("seed", 0)),
            include_descriptor=not self.metric_only,
        )
        self.apply_to(net)
        return net

    def apply_to(self, net: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None):
        """Copy saved tensors into ``net`` (and Adam state into ``optimizer``)."""
        named = dict(net.named_parameters())
        buffers = dict(net.named_buffers())
        with torch.no_grad():
            for name, tensor in named.items():
                self._copy_into(f"param/{name}", tensor)
            for name, tensor in buffers.items():
                self._copy_into(f"buffer/{name}", tensor)
        if optimizer is None:
            return
        for name, param in named.items():
            avg_key = f"adam/{name}/exp_avg"
            if avg_key not in self.blobs:
                continue
            state = {
                "step": torch.tensor(float(self.optimizer_steps.get(name, 0.0))),
                "exp_avg": torch.from_numpy(self.blobs[avg_key].copy()),
                "exp_avg_sq": torch.from_numpy(self.blobs[f"adam/{name}/exp_avg_sq"].copy()),
            }
            optimizer.state[param] = state

    def _copy_into(self, key: str, tensor: torch.Tensor):
        if key not in self.blobs:
            raise CheckpointFormatError(f"checkpoint is missing tensor {key!r}")
        blob = self.blobs[key]
        if tuple(blob.shape) != tuple(tensor.shape):
            raise CheckpointFormatError(
                f"tensor {key!r} has shape {tuple(blob.shape)}, expected {tuple(tensor.shape)}"
            )
        tensor.copy_(torch.from_numpy(blob.copy()))


def save_checkpoint(
    path,
    net: torch.nn.Module,
    config: dict,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    path = Path(path)
    entries = []  # (name, np.ndarray float32)

    def add(name: str, tensor: torch.Tensor):
        entries.append((name, tensor.detach().cpu().to(torch.float32).numpy()))

    for name, param in net.named_parameters():
        add(f"param/{name}", param)
    for name, buf in net.named_buffers():
        add(f"buffer/{name}", buf)

    optimizer_steps = {}
    if optimizer is not None:
        by_id = {id(p): n for n, p in net.named_parameters()}
        for param, state in optimizer.state.items():
            name = by_id.get(id(param))
            if name is None or "exp_avg" not in state:
                continue
            optimizer_steps[name] = float(state["step"])
            add(f"adam/{name}/exp_avg", state["exp_avg"])
            add(f"adam/{name}/exp_avg_sq", state["exp_avg_sq"])

    index = []
    offset = 0
    payload = []
    for name, arr in entries:
        # tobytes always emits C-order data; avoid ascontiguousarray, which
        # silently promotes 0-dim arrays to 1-dim
        raw = arr.astype("<f4", copy=False).tobytes()
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payload.append(raw)
        offset += len(raw)

    header = {
        "epoch": int(epoch),
        "config": config,
        "metric_only": not getattr(net, "include_descriptor", True),
        "optimizer_steps": optimizer_steps,
        "blobs": index,
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_raw)))
        fh.write(header_raw)
        for raw in payload:
            fh.write(raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointFormatError(f"checkpoint {path} does not exist") from exc
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointFormatError(f"{path} has unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC) + 4)
    header_start = len(MAGIC) + 12
    blob_start = header_start + header_len
    if len(raw) < blob_start:
        raise CheckpointFormatError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[header_start:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path} has an unreadable header: {exc}") from exc

    blobs = {}
    for entry in header["blobs"]:
        lo = blob_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointFormatError(
                f"{path} is truncated: blob {entry['name']!r} ends at byte {hi}, "
                f"file has {len(raw)}"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4, offset=lo)
        blobs[entry["name"]] = arr.reshape(entry["shape"])

    return Checkpoint(
        epoch=int(header["epoch"]),
        config=header.get("config", {}),
        metric_only=bool(header.get("metric_only", False)),
        blobs=blobs,
        optimizer_steps=header.get("optimizer_steps", {}),
        path=path,
    )
