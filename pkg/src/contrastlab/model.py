"""Shared-weight encoder mapping image batches to unit-norm embeddings."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

ARCHITECTURES = ("small_conv", "mlp")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    architecture: str = "small_conv"
    widths: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 128
    projection_head: bool = False
    head_hidden: int = 128
    input_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.projection_head and self.head_hidden < 1:
            raise ConfigError("head_hidden must be positive")
        if self.architecture == "small_conv" and self.input_size < 2 ** len(self.widths):
            raise ConfigError(f"input_size {self.input_size} too small for {len(self.widths)} pooling stages")

    @property
    def penultimate_dim(self) -> int:
        return self.widths[-1]


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, T.Tensor] = field(default_factory=dict)

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "EncoderState":
        return EncoderState(self.config, {k: T.Tensor(v.data.astype(dtype), requires_grad=True)
                                          for k, v in self.params.items()})

    def frozen(self) -> "EncoderState":
        """Same arrays, no gradient tracking (for evaluation)."""
        return EncoderState(self.config, {k: T.Tensor(v.data) for k, v in self.params.items()})

    def copy(self) -> "EncoderState":
        return self.astype(next(iter(self.params.values())).dtype)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params.values())


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if config.architecture == "small_conv":
        c = config.in_channels
        for i, w in enumerate(config.widths):
            shapes[f"conv{i}.kernel"] = (w, c, 3, 3)
            shapes[f"conv{i}.bias"] = (w,)
            c = w
    else:
        c = config.in_channels * config.input_size ** 2
        for i, w in enumerate(config.widths):
            shapes[f"fc{i}.weight"] = (c, w)
            shapes[f"fc{i}.bias"] = (w,)
            c = w
    if config.projection_head:
        shapes["head0.weight"] = (c, config.head_hidden)
        shapes["head0.bias"] = (config.head_hidden,)
        c = config.head_hidden
        shapes["head1.weight"] = (c, config.embed_dim)
        shapes["head1.bias"] = (config.embed_dim,)
    else:
        shapes["out.weight"] = (c, config.embed_dim)
        shapes["out.bias"] = (config.embed_dim,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]


def init_encoder(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderState:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / _fan_in(name, shape))).astype(dtype)
        params[name] = T.Tensor(data, requires_grad=True)
    return EncoderState(config, params)


def encode(state: EncoderState, batch: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """Return ``(penultimate, embedding)``; only the embedding is L2-normalized."""
    cfg, p = state.config, state.params
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise T.DimensionError(f"encoder expects (n, {expected[0]}, {expected[1]}, {expected[2]}), got {batch.shape}")
    h = batch
    if cfg.architecture == "small_conv":
        for i in range(len(cfg.widths)):
            h = T.conv2d(h, p[f"conv{i}.kernel"], p[f"conv{i}.bias"], stride=1, padding=1)
            h = T.max_pool2x2(T.relu(h))
        feats = T.global_avg_pool(h)
    else:
        h = T.reshape(h, (batch.shape[0], -1))
        for i in range(len(cfg.widths)):
            h = T.relu(T.affine(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
        feats = h
    if cfg.projection_head:
        out = T.relu(T.affine(feats, p["head0.weight"], p["head0.bias"]))
        out = T.affine(out, p["head1.weight"], p["head1.bias"])
    else:
        out = T.affine(feats, p["out.weight"], p["out.bias"])
    return feats, T.l2_normalize_rows(out, 1e-12)


# ---------------------------------------------------------------------------
# checkpoint container
#
# magic "CLABCKPT" | u32 version | u32 header length | JSON header | data blob
# The header holds {"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}
# with offsets relative to the blob start. All integers and arrays little-endian.

MAGIC = b"CLABCKPT"
VERSION = 1


def write_container(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                                          offset=start).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_checkpoint(path: str | Path, state: EncoderState, extra: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"param/{k}": v.data for k, v in state.params.items()}
    arrays.update({f"extra/{k}": v for k, v in (extra_arrays or {}).items()})
    meta = {"encoder": asdict(state.config), **(extra or {})}
    write_container(path, arrays, meta)


def load_checkpoint(path: str | Path) -> tuple[EncoderState, dict, dict[str, np.ndarray]]:
    arrays, meta = read_container(path)
    config = EncoderConfig(**meta["encoder"])
    params = {}
    for name, shape in parameter_shapes(config).items():
        arr = arrays[f"param/{name}"]
        if tuple(arr.shape) != shape:
            raise T.DimensionError(f"checkpoint tensor {name} has shape {arr.shape}, config expects {shape}")
        params[name] = T.Tensor(arr, requires_grad=True)
    extras = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return EncoderState(config, params), meta, extras
