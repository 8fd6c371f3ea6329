"""Binary checkpoint container.

Layout (little-endian)::

    b"DDSR" | u32 version | u32 n_fields | i64 * n_fields  (ModelConfig, field order)
    u32 n_entries
    per entry: u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u32 rank
               | u32 * rank shape | row-major payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .adaptation import LoraAdapter
from .backbone import ModelConfig, backbone_param_shapes
from .fda import fda_param_shapes
from .model import DualDomainNet
from .tensor import Tensor

MAGIC = b"DDSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def _write_u32(buf, v: int) -> None:
    buf.write(struct.pack("<I", v))


def _read(buf, fmt: str):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def encode(config: ModelConfig, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_u32(buf, VERSION)
    names = ModelConfig.field_names()
    _write_u32(buf, len(names))
    for name in names:
        buf.write(struct.pack("<q", int(getattr(config, name))))
    _write_u32(buf, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        _write_u32(buf, len(raw))
        buf.write(raw)
        buf.write(struct.pack("<B", 0))
        _write_u32(buf, arr.ndim)
        for n in arr.shape:
            _write_u32(buf, n)
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a DDSR checkpoint (bad magic)")
    (version,) = _read(buf, "<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_fields,) = _read(buf, "<I")
    names = ModelConfig.field_names()
    if n_fields != len(names):
        raise CheckpointError(f"config block has {n_fields} fields, expected {len(names)}")
    values = _read(buf, f"<{n_fields}q")
    try:
        config = ModelConfig(**dict(zip(names, values)))
    except ValueError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    (n_entries,) = _read(buf, "<I")
    tensors = {}
    for _ in range(n_entries):
        (name_len,) = _read(buf, "<I")
        name = buf.read(name_len).decode("utf-8")
        (code,) = _read(buf, "<B")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        (rank,) = _read(buf, "<I")
        shape = _read(buf, f"<{rank}I") if rank else ()
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise CheckpointError(f"truncated payload for {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float32)
    if buf.read(1):
        raise CheckpointError("trailing bytes after last entry")
    return config, tensors


def expected_names(config: ModelConfig) -> set[str]:
    names = set(backbone_param_shapes(config))
    if config.use_fda:
        names |= set(fda_param_shapes(config))
    return names


def save(net: DualDomainNet, path: str | Path, merged: bool = False) -> Path:
    """Write ``net``; with ``merged`` the adapters are folded into W and omitted."""
    if merged:
        net = net.merged()
    tensors = {k: v.data for k, v in net.named_tensors().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(net.config, tensors))
    return path


def load(path: str | Path, expect: ModelConfig | None = None) -> DualDomainNet:
    """Read a checkpoint, checking config compatibility and name completeness."""
    config, tensors = decode(Path(path).read_bytes())
    if expect is not None:
        keys = ("n_groups", "n_units", "dim", "window", "scale", "channels", "up_dim", "mlp_ratio")
        bad = [k for k in keys if getattr(config, k) != getattr(expect, k)]
        if bad:
            raise CheckpointError(f"checkpoint config differs in {bad}")
    params = {k: Tensor(v) for k, v in tensors.items() if ".lora." not in k}
    want = expected_names(config)
    missing = want - set(params)
    extra = set(params) - want
    if missing or extra:
        raise CheckpointError(f"checkpoint names incomplete: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    shapes = backbone_param_shapes(config)
    if config.use_fda:
        shapes.update(fda_param_shapes(config))
    for k, shape in shapes.items():
        if params[k].shape != tuple(shape):
            raise CheckpointError(f"{k}: stored shape {params[k].shape} != expected {tuple(shape)}")
    adapters = {}
    for k, v in tensors.items():
        if k.endswith(".lora.down"):
            target = k[: -len(".lora.down")]
            up = tensors.get(f"{target}.lora.up")
            if up is None:
                raise CheckpointError(f"adapter {target!r} lacks its up projection")
            adapters[target] = LoraAdapter(Tensor(v), Tensor(up), config.lora_scale)
        elif k.endswith(".lora.up") and f"{k[: -len('.lora.up')]}.lora.down" not in tensors:
            raise CheckpointError(f"adapter {k!r} lacks its down projection")
    net = DualDomainNet(config, params, adapters)
    if set(adapters) != set(net.plan.lora_targets if config.rank else ()):
        raise CheckpointError("stored adapters do not match the freeze plan's LoRA targets")
    return net
