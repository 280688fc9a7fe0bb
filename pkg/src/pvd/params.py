"""Parameter storage, the AdamW optimizer and the checkpoint file format.

Checkpoint layout::

    PVDCKPT <version>\\n
    {"meta": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}\\n
    <little-endian float32 payloads, offsets relative to the payload start>
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import Tensor
from .errors import InvalidArgument, InvalidState

CKPT_MAGIC = "PVDCKPT"
CKPT_VERSION = 1
LR = 5e-4
WEIGHT_DECAY = 5e-2
BETAS = (0.9, 0.999)


class ParamStore:
    """Named trainable tensors in insertion order."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self._params: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value, decay: bool | None = None) -> Tensor:
        if name in self._params:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self._decay[name] = t.ndim >= 2 if decay is None else decay
        return t

    def uniform(self, name: str, shape: tuple, bound: float, decay: bool | None = None) -> Tensor:
        return self.add(name, self.rng.uniform(-bound, bound, size=shape), decay)

    def zeros(self, name: str, shape: tuple, decay: bool | None = None) -> Tensor:
        return self.add(name, np.zeros(shape), decay)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise InvalidArgument(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self._params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise InvalidArgument(f"shape mismatch for {k}: {a.shape} vs {p.shape}")
            p.data = a.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another precision (used by gradient checks)."""
        out = ParamStore(dtype=dtype)
        for k, p in self._params.items():
            out.add(k, p.data, self._decay[k])
        return out

    def max_abs_grad(self) -> float:
        vals = [float(np.max(np.abs(p.grad))) for p in self._params.values() if p.grad is not None and p.grad.size]
        return max(vals, default=0.0)


def adamw_step(params: ParamStore, moments: dict, lr: float = LR, weight_decay: float = WEIGHT_DECAY,
               betas: tuple = BETAS, step_index: int = 1, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update; ``step_index`` starts at 1."""
    b1, b2 = betas
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for name, p in params.items():
        if p.grad is None:
            raise InvalidState(f"parameter {name!r} has no gradient")
        g = p.grad
        m, v = moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        moments[name] = (m, v)
        data = p.data
        if weight_decay and params.decays(name):
            data = data - lr * weight_decay * data
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class AdamW:
    def __init__(self, params: ParamStore, lr: float = LR, weight_decay: float = WEIGHT_DECAY,
                 betas: tuple = BETAS, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.moments: dict[str, tuple] = {}
        self.step_index = 0

    def step(self, lr: float | None = None) -> None:
        self.step_index += 1
        adamw_step(self.params, self.moments, self.lr if lr is None else lr, self.weight_decay,
                   self.betas, self.step_index, self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (m, v) in self.moments.items():
            out[f"adam.m/{name}"] = m
            out[f"adam.v/{name}"] = v
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_index: int) -> None:
        self.moments = {}
        for name in self.params:
            if f"adam.m/{name}" in arrays:
                dt = self.params[name].dtype
                self.moments[name] = (arrays[f"adam.m/{name}"].astype(dt), arrays[f"adam.v/{name}"].astype(dt))
        self.step_index = int(step_index)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(a)), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode())
        fh.write(header.encode() + b"\n")
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        first = fh.readline().decode().split()
        if len(first) != 2 or first[0] != CKPT_MAGIC:
            raise InvalidArgument(f"{path}: not a checkpoint file")
        if int(first[1]) != CKPT_VERSION:
            raise InvalidArgument(f"{path}: unsupported checkpoint version {first[1]}")
        header = json.loads(fh.readline())
        payload = fh.read()
    arrays = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(e["shape"])
    return arrays, header["meta"]
