"""Versioned binary checkpoints with bit-exact round trips.

Layout: 8-byte magic, uint32 format version, uint64 header length, a JSON
header (config, counters, optimizer metadata, and a manifest of named
tensors with dtype/shape/offset), then the raw little-endian tensor payload.
Loading refuses a config-hash mismatch unless forced.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .datasets import TrainingViews
from .errors import CorruptCheckpoint, VersionMismatch
from .training import TrainState

MAGIC = b"PSFCKPT\x00"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _collect_tensors(state: TrainState) -> tuple[dict[str, torch.Tensor], dict]:
    tensors: dict[str, torch.Tensor] = {}
    for prefix, module in (("field", state.field), ("disc", state.disc), ("inv", state.inv)):
        for k, v in module.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    tensors["pose_table"] = state.pose_table.data
    if state.inv_buffer_patches.shape[0] > 0:
        tensors["inv_buffer_patches"] = state.inv_buffer_patches
        tensors["inv_buffer_poses"] = state.inv_buffer_poses
    opt_meta: dict = {}
    for name, opt in state.optimizers.items():
        sd = opt.state_dict()
        opt_meta[name] = {"param_groups": sd["param_groups"], "scalars": {}}
        for pid, st in sd["state"].items():
            for key, val in st.items():
                if torch.is_tensor(val):
                    tensors[f"opt.{name}.{pid}.{key}"] = val
                else:
                    opt_meta[name]["scalars"].setdefault(str(pid), {})[key] = val
    tensors["rng"] = state.generator.get_state()
    meta = {
        "iteration": state.iteration,
        "a_steps_done": state.a_steps_done,
        "inv_version": state.inv_version,
        "inv_buffer_len": state.inv_buffer_len,
        "inv_buffer_pos": state.inv_buffer_pos,
        "opt_meta": opt_meta,
    }
    return tensors, meta


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Serialize every parameter, buffer, optimizer slot, and the rng state."""
    tensors, meta = _collect_tensors(state)
    manifest = []
    offset = 0
    blobs = []
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = _DTYPES[t.dtype]
        raw = arr.astype(np.dtype(dtype), copy=False).tobytes()
        manifest.append(
            {"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset,
             "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "meta": meta,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, default=float).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CorruptCheckpoint(f"bad magic in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"checkpoint format v{version}, expected v{FORMAT_VERSION}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            return json.loads(fh.read(hlen))
        except json.JSONDecodeError as exc:
            raise CorruptCheckpoint(f"unreadable header in {path}") from exc


def load_checkpoint(
    path: str | Path,
    views: TrainingViews,
    config: TrainConfig | None = None,
    force: bool = False,
) -> TrainState:
    """Rebuild a TrainState from a checkpoint; bit-exact with the saved run.

    ``config`` defaults to the one embedded in the checkpoint. A hash
    mismatch between a supplied config and the saved one raises
    VersionMismatch unless ``force`` is set.
    """
    header = read_header(path)
    saved_config = TrainConfig.from_dict(header["config"])
    if config is None:
        config = saved_config
    elif config.config_hash() != header["config_hash"] and not force:
        raise VersionMismatch(
            f"config hash {config.config_hash()} != checkpoint {header['config_hash']}"
        )

    data = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", data[12:20])
    payload_start = 20 + hlen

    tensors: dict[str, torch.Tensor] = {}
    for entry in header["manifest"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CorruptCheckpoint(f"truncated payload in {path}")
        arr = np.frombuffer(data[start:end], dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).to(_TORCH_DTYPES[entry["dtype"]])

    state = TrainState(views, config)
    for prefix, module in (("field", state.field), ("disc", state.disc), ("inv", state.inv)):
        sd = {k[len(prefix) + 1:]: v for k, v in tensors.items()
              if k.startswith(prefix + ".") and not k.startswith("opt.")}
        module.load_state_dict(sd)
    with torch.no_grad():
        state.pose_table.copy_(tensors["pose_table"])
    if "inv_buffer_patches" in tensors:
        state.inv_buffer_patches = tensors["inv_buffer_patches"]
        state.inv_buffer_poses = tensors["inv_buffer_poses"]

    meta = header["meta"]
    for name, opt in state.optimizers.items():
        opt_meta = meta["opt_meta"][name]
        opt_state: dict = {}
        prefix = f"opt.{name}."
        for key, t in tensors.items():
            if key.startswith(prefix):
                _, _, pid, slot = key.split(".", 3)
                opt_state.setdefault(int(pid), {})[slot] = t
        for pid, scalars in opt_meta.get("scalars", {}).items():
            opt_state.setdefault(int(pid), {}).update(scalars)
        opt.load_state_dict({"state": opt_state, "param_groups": opt_meta["param_groups"]})

    state.generator.set_state(tensors["rng"].to(torch.uint8))
    state.iteration = meta["iteration"]
    state.a_steps_done = meta["a_steps_done"]
    state.inv_version = meta["inv_version"]
    state.inv_buffer_len = meta.get("inv_buffer_len", 0)
    state.inv_buffer_pos = meta.get("inv_buffer_pos", 0)
    return state
