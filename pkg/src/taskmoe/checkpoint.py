"""Portable binary model checkpoints.

Layout (all integers and reals little-endian):

* magic ``b"MOECKPT1"`` (8 bytes)
* header: 10 uint32 -- format version, num_features, d_hidden, d_in, d_out,
  num_experts, num_tasks, k_shared, k_adaptive, nonlinearity code
  (expert_code * 16 + encoder_code; 0 = identity, 1 = relu)
* uint64 seed, float64 regularizer strength
* num_tasks float64 task loss weights, num_tasks float64 router pooling weights
* parameter blocks as raw float64 in :meth:`MoeModel.parameter_blocks` order
  (encoder1 w/b, encoder2 w/b, expert_0.. w/b, router_0.. w/b, head_0.. w/b)

Reloading reproduces bitwise-identical predictions.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import DataFormatError
from .experts import ExpertPool
from .linalg import Affine
from .model import MoeModel
from .routing import RouterBank, RoutingBudget

__all__ = ["load_model", "save_model"]

MAGIC = b"MOECKPT1"
VERSION = 1
_NONLIN_CODES = {"identity": 0, "relu": 1}
_NONLIN_NAMES = {code: name for name, code in _NONLIN_CODES.items()}


def save_model(model: MoeModel, seed: int, path: str) -> None:
    """Write the checkpoint atomically (temp file, then rename)."""
    header = struct.pack(
        "<10I",
        VERSION,
        model.num_features,
        model.d_hidden,
        model.d_in,
        model.d_out,
        model.num_experts,
        model.num_tasks,
        model.budget.k_shared,
        model.budget.k_adaptive,
        _NONLIN_CODES[model.experts.nonlinearity] * 16
        + _NONLIN_CODES[model.encoder_nonlinearity],
    )
    parts = [MAGIC, header, struct.pack("<Qd", seed, model.lb_strength)]
    parts.append(model.task_loss_weights.astype("<f8").tobytes())
    parts.append(model.routers.task_weights.astype("<f8").tobytes())
    for block in model.parameter_blocks().values():
        parts.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
    payload = b"".join(parts)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_ckpt_")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes, path: str) -> None:
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise DataFormatError(f"{self.path}: checkpoint truncated at byte {self.offset}")
        chunk = self.raw[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(count * 8), dtype="<f8").astype(np.float64)
        return data.reshape(shape)


def load_model(path: str) -> tuple[MoeModel, int]:
    """Read a checkpoint; returns the model and the stored seed."""
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as err:
        raise DataFormatError(f"cannot read checkpoint {path}: {err}") from err
    reader = _Reader(raw, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise DataFormatError(f"{path}: not a model checkpoint (bad magic)")
    (
        version,
        num_features,
        d_hidden,
        d_in,
        d_out,
        num_experts,
        num_tasks,
        k_shared,
        k_adaptive,
        nonlin,
    ) = struct.unpack("<10I", reader.take(40))
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    expert_code, encoder_code = divmod(nonlin, 16)
    if expert_code not in _NONLIN_NAMES or encoder_code not in _NONLIN_NAMES:
        raise DataFormatError(f"{path}: unknown nonlinearity code {nonlin}")
    seed, lb_strength = struct.unpack("<Qd", reader.take(16))
    task_loss_weights = reader.floats((num_tasks,))
    router_weights = reader.floats((num_tasks,))

    def affine(rows: int, cols: int) -> Affine:
        return Affine(weight=reader.floats((rows, cols)), bias=reader.floats((rows,)))

    encoder1 = affine(d_hidden, num_features)
    encoder2 = affine(d_in, d_hidden)
    experts = ExpertPool(
        layers=[affine(d_out, d_in) for _ in range(num_experts)],
        nonlinearity=_NONLIN_NAMES[expert_code],
    )
    routers = RouterBank(
        maps=[affine(num_experts, d_in) for _ in range(num_tasks)],
        task_weights=router_weights,
    )
    heads = [affine(1, d_out) for _ in range(num_tasks)]
    if reader.offset != len(raw):
        raise DataFormatError(
            f"{path}: {len(raw) - reader.offset} trailing bytes after parameters"
        )
    model = MoeModel(
        encoder1=encoder1,
        encoder2=encoder2,
        experts=experts,
        routers=routers,
        heads=heads,
        task_loss_weights=task_loss_weights,
        lb_strength=lb_strength,
        budget=RoutingBudget(k_shared=k_shared, k_adaptive=k_adaptive),
        encoder_nonlinearity=_NONLIN_NAMES[encoder_code],
    )
    return model, int(seed)
