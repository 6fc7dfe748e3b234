"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FFVT"                      magic
    u32  version                 currently 1
    u32  n, n bytes              UTF-8 config blob: sorted "key=value\\n" lines
                                 (model.*, train.*, state.* keys)
    u32  tensor count            parameters, then per tensor:
         u16 name length, name bytes, u8 rank, u32 dims..., float32 data
    u32  tensor count            optimizer moments, same framing,
                                 named "m.<param>" and "v.<param>"
    u64  step
    4 x u64                      RNG state: PCG64 state hi/lo, increment hi/lo

Values are always stored as 32-bit floats. A file is written to a temporary
sibling first and moved into place, so a failed write never clobbers an
existing checkpoint.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, build_config, config_lines, parse_key_values
from .errors import CorruptionError, FormatError
from .model import ModelConfig, ParameterSet, param_shapes
from .optim import OptimizerState
from .tensor import Tensor

MAGIC = b"FFVT"
VERSION = 1
_MASK64 = (1 << 64) - 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ParameterSet
    opt_state: OptimizerState
    rng_state: tuple[int, int, int, int] = (0, 0, 0, 0)
    epoch: int = 0
    best_metric: float = -math.inf

    @property
    def step(self) -> int:
        return self.opt_state.step


def pcg64_to_words(bitgen: np.random.PCG64) -> tuple[int, int, int, int]:
    st = bitgen.state
    if st.get("has_uint32"):
        # a buffered half-word would be lost by the 4-word encoding
        raise ValueError("generator holds a buffered 32-bit value; cannot serialize exactly")
    s, inc = st["state"]["state"], st["state"]["inc"]
    return (s >> 64) & _MASK64, s & _MASK64, (inc >> 64) & _MASK64, inc & _MASK64


def words_to_pcg64(words) -> np.random.PCG64:
    s_hi, s_lo, i_hi, i_lo = (int(w) for w in words)
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": (s_hi << 64) | s_lo, "inc": (i_hi << 64) | i_lo},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return bitgen


def _pack_tensor(name: str, data: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + np.ascontiguousarray(data, dtype="<f4").tobytes()


def _pack_tensors(items: list[tuple[str, np.ndarray]]) -> bytes:
    return struct.pack("<I", len(items)) + b"".join(_pack_tensor(n, a) for n, a in items)


def _header_text(ckpt: Checkpoint) -> str:
    lines = config_lines(ckpt.model_config, "model.") + config_lines(ckpt.train_config, "train.")
    lines += [f"state.best_metric={ckpt.best_metric!r}", f"state.epoch={ckpt.epoch}"]
    return "".join(line + "\n" for line in sorted(lines))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = _header_text(ckpt).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    parts.append(_pack_tensors([(k, t.data) for k, t in ckpt.params.items()]))
    moments = [(f"m.{k}", ckpt.opt_state.m[k]) for k in ckpt.params]
    moments += [(f"v.{k}", ckpt.opt_state.v[k]) for k in ckpt.params]
    parts.append(_pack_tensors(moments))
    parts.append(struct.pack("<Q", ckpt.opt_state.step))
    parts.append(struct.pack("<4Q", *ckpt.rng_state))
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    payload = encode_checkpoint(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptionError(f"truncated while reading {what}", offset=len(self.raw))
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self, what: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", f"{what} count")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = self.unpack("<H", f"{what} name length")
            start = self.pos
            try:
                name = self.take(name_len, f"{what} name").decode("utf-8")
            except UnicodeDecodeError:
                raise CorruptionError(f"{what} name is not UTF-8", offset=start) from None
            (rank,) = self.unpack("<B", f"{name} rank")
            dims = self.unpack(f"<{rank}I", f"{name} dims")
            n = math.prod(dims)
            data = np.frombuffer(self.take(4 * n, f"{name} values"), dtype="<f4")
            if name in out:
                raise CorruptionError(f"duplicate tensor {name!r}", offset=start)
            out[name] = data.astype(np.float32).reshape(dims)
        return out


def _check_shapes(found: dict[str, np.ndarray], expected: dict[str, tuple], what: str) -> None:
    if list(found) != list(expected):
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        raise CorruptionError(
            f"{what} do not match the embedded config (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, shape in expected.items():
        if found[name].shape != tuple(shape):
            raise CorruptionError(
                f"{what} {name!r} has shape {found[name].shape}, config implies {tuple(shape)}"
            )


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (blob_len,) = r.unpack("<I", "config length")
    blob_start = r.pos
    try:
        text = r.take(blob_len, "config blob").decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptionError("config blob is not UTF-8", offset=blob_start) from None
    try:
        values = parse_key_values(text, "checkpoint")
        model_vals = {k[6:]: v for k, v in values.items() if k.startswith("model.")}
        train_vals = {k[6:]: v for k, v in values.items() if k.startswith("train.")}
        model_config = build_config(ModelConfig, model_vals, "checkpoint")
        train_config = build_config(TrainConfig, train_vals, "checkpoint")
        epoch = int(values["state.epoch"])
        best = float(values["state.best_metric"])
    except (ValueError, KeyError) as exc:
        raise CorruptionError(f"unreadable config blob: {exc}", offset=blob_start) from None

    shapes = param_shapes(model_config)
    params_raw = r.tensors("parameter")
    _check_shapes(params_raw, shapes, "parameters")
    moments = r.tensors("optimizer moment")
    expected_moments = {f"m.{k}": s for k, s in shapes.items()}
    expected_moments.update({f"v.{k}": s for k, s in shapes.items()})
    _check_shapes(moments, expected_moments, "optimizer moments")
    (step,) = r.unpack("<Q", "step")
    rng_state = r.unpack("<4Q", "rng state")
    if r.pos != len(raw):
        raise CorruptionError(f"{len(raw) - r.pos} trailing bytes", offset=r.pos)

    params = ParameterSet(
        (k, Tensor(a, requires_grad=True, dtype=np.float32)) for k, a in params_raw.items()
    )
    state = OptimizerState(
        m={k: moments[f"m.{k}"] for k in shapes},
        v={k: moments[f"v.{k}"] for k in shapes},
        step=step,
    )
    return Checkpoint(model_config, train_config, params, state, tuple(rng_state), epoch, best)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
