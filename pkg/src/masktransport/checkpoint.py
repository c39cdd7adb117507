"""Single-file checkpoint container with a versioned header.

Layout:

    magic (8 bytes) | header length (uint64 LE) | header JSON (utf-8) | payload

The header is canonical JSON (sorted keys, no whitespace) describing the step
counter, a config snapshot, and an index of named tensor segments; the payload
is the segments' raw little-endian bytes concatenated in index order.  Because
every piece of the encoding is canonical, save -> load -> save reproduces the
original file byte for byte, which is what the persistence tests pin down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np
import torch

MAGIC = b"MTCP0001"
FORMAT_VERSION = 1

_DTYPES = {
    "f32": (torch.float32, np.dtype("<f4")),
    "f64": (torch.float64, np.dtype("<f8")),
    "i64": (torch.int64, np.dtype("<i8")),
    "u8": (torch.uint8, np.dtype("u1")),
}
_DTYPE_CODES = {torch_dtype: code for code, (torch_dtype, _) in _DTYPES.items()}


class CheckpointFormatError(RuntimeError):
    """Raised for truncated, corrupt, or wrong-version checkpoint files."""


@dataclass
class Checkpoint:
    step: int
    config: dict
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    index = {}
    chunks = []
    offset = 0
    for name in sorted(checkpoint.tensors):
        tensor = checkpoint.tensors[name].detach().cpu().contiguous()
        code = _DTYPE_CODES.get(tensor.dtype)
        if code is None:
            raise CheckpointFormatError(
                f"segment {name!r} has unsupported dtype {tensor.dtype}"
            )
        raw = tensor.numpy().astype(_DTYPES[code][1], copy=False).tobytes()
        index[name] = {
            "dtype": code,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps(
        {
            "format_version": checkpoint.format_version,
            "step": checkpoint.step,
            "config": checkpoint.config,
            "segments": index,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise CheckpointFormatError(f"{path}: truncated (no header)")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:8]!r}")
    header_len = int.from_bytes(data[len(MAGIC) : len(MAGIC) + 8], "little")
    body_start = len(MAGIC) + 8
    if len(data) < body_start + header_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[body_start : body_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: format version {header.get('format_version')!r}, "
            f"this build reads {FORMAT_VERSION}"
        )

    payload = data[body_start + header_len :]
    tensors = {}
    for name, meta in header["segments"].items():
        end = meta["offset"] + meta["nbytes"]
        if end > len(payload):
            raise CheckpointFormatError(f"{path}: truncated segment {name!r}")
        torch_dtype, np_dtype = _DTYPES[meta["dtype"]]
        arr = np.frombuffer(
            payload, dtype=np_dtype, count=meta["nbytes"] // np_dtype.itemsize,
            offset=meta["offset"],
        ).reshape(meta["shape"])
        tensors[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return Checkpoint(
        step=header["step"],
        config=header["config"],
        tensors=tensors,
        format_version=header["format_version"],
    )


# --------------------------------------------------------------------------
# module / optimizer <-> segment helpers
# --------------------------------------------------------------------------

def module_segments(prefix: str, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {f"{prefix}/{name}": value
            for name, value in module.state_dict().items()}


def load_module_segments(prefix: str, module: torch.nn.Module,
                         tensors: Dict[str, torch.Tensor]) -> None:
    state = {}
    head = f"{prefix}/"
    for name, value in tensors.items():
        if name.startswith(head):
            state[name[len(head):]] = value
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointFormatError(
            f"segment group {prefix!r} is missing tensors: {sorted(missing)[:4]}"
        )
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointFormatError(f"segment group {prefix!r}: {exc}") from exc


def optimizer_segments(optimizer: torch.optim.Optimizer,
                       param_names) -> Dict[str, torch.Tensor]:
    """Flatten Adam state keyed by stable parameter names (not ids)."""
    segments: Dict[str, torch.Tensor] = {}
    params = [p for group in optimizer.param_groups for p in group["params"]]
    if len(params) != len(param_names):
        raise ValueError("param_names must match optimizer parameter count")
    for name, param in zip(param_names, params):
        state = optimizer.state.get(param, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in state:
                segments[f"optimizer/{name}/{key}"] = state[key]
        if "step" in state:
            step = state["step"]
            if not torch.is_tensor(step):
                step = torch.tensor(float(step))
            segments[f"optimizer/{name}/step"] = step.to(torch.float32)
    return segments


def load_optimizer_segments(optimizer: torch.optim.Optimizer, param_names,
                            tensors: Dict[str, torch.Tensor]) -> None:
    params = [p for group in optimizer.param_groups for p in group["params"]]
    if len(params) != len(param_names):
        raise ValueError("param_names must match optimizer parameter count")
    for name, param in zip(param_names, params):
        key_avg = f"optimizer/{name}/exp_avg"
        if key_avg not in tensors:
            continue  # parameter had no state yet (step-0 checkpoint)
        optimizer.state[param] = {
            "step": tensors[f"optimizer/{name}/step"].clone(),
            "exp_avg": tensors[key_avg].clone(),
            "exp_avg_sq": tensors[f"optimizer/{name}/exp_avg_sq"].clone(),
        }
