"""On-disk formats: raw token files, checkpoints and heatmap exports.

Both binary formats are little-endian with a 4-byte magic and a u32
version. Token payloads are float32, checkpoint tensors float64.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, WeiADNet

TOKEN_MAGIC = b"WTKS"
CKPT_MAGIC = b"WADC"
TOKEN_VERSION = 1
CKPT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


# --- token files -----------------------------------------------------------


@dataclass
class TokenFile:
    patch: np.ndarray  # (N, d) float32
    cls: np.ndarray | None = None  # (d,) float32

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype="<f4")
        if self.patch.ndim != 2:
            raise FormatError("patch tokens must be an (N, d) array")
        if self.cls is not None:
            self.cls = np.asarray(self.cls, dtype="<f4").reshape(-1)
            if self.cls.shape[0] != self.patch.shape[1]:
                raise FormatError("CLS width differs from patch width")

    def to_bytes(self) -> bytes:
        n, d = self.patch.shape
        has_cls = self.cls is not None
        head = TOKEN_MAGIC + struct.pack("<IIIB", TOKEN_VERSION, n, d, int(has_cls))
        rows = [self.patch] + ([self.cls[None]] if has_cls else [])
        return head + np.ascontiguousarray(np.concatenate(rows), dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenFile":
        r = _Reader(data, "token file")
        if r.take(4) != TOKEN_MAGIC:
            raise FormatError("not a token file (bad magic)")
        version, n, d, has_cls = struct.unpack("<IIIB", r.take(13))
        if version != TOKEN_VERSION:
            raise FormatError(f"unsupported token file version {version}")
        if has_cls not in (0, 1):
            raise FormatError("has_cls flag must be 0 or 1")
        rows = n + has_cls
        flat = np.frombuffer(r.take(rows * d * 4), dtype="<f4").reshape(rows, d)
        r.done()
        return cls(flat[:n].copy(), flat[n].copy() if has_cls else None)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TokenFile":
        return cls.from_bytes(Path(path).read_bytes())


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    """Config block plus named float64 tensors.

    ``config`` holds the model fields under ``encoder.``/``aggregator.``/
    ``tiers.`` keys; ``extra`` carries anything else (loss and training
    settings) as free-form key/value text.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: WeiADNet, extra: dict[str, str] | None = None) -> "Checkpoint":
        params = {
            name: t.detach().to(torch.float64).numpy().copy()
            for name, t in model.state_dict().items()
        }
        return cls(model.cfg, params, dict(extra or {}))

    def build_model(self) -> WeiADNet:
        model = WeiADNet(self.config)
        expected = set(model.state_dict())
        if expected != set(self.params):
            missing = sorted(expected - set(self.params))
            unknown = sorted(set(self.params) - expected)
            raise FormatError(f"parameter set mismatch: missing {missing}, unknown {unknown}")
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.params.items()})
        model.eval()
        return model

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC + _U32.pack(CKPT_VERSION))
        entries = list(self.config.to_flat().items()) + [
            (f"extra.{k}", v) for k, v in self.extra.items()
        ]
        buf.write(_U32.pack(len(entries)))
        for k, v in entries:
            buf.write(_text(k) + _text(v))
        buf.write(_U32.pack(len(self.params)))
        for name, arr in self.params.items():
            arr = np.asarray(arr, dtype="<f8")
            buf.write(_text(name) + _U32.pack(arr.ndim))
            for dim in arr.shape:
                buf.write(_U64.pack(dim))
            buf.write(np.ascontiguousarray(arr).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data, "checkpoint")
        if r.take(4) != CKPT_MAGIC:
            raise FormatError("not a checkpoint (bad magic)")
        version = r.u32()
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        flat, extra = {}, {}
        for _ in range(r.u32()):
            k, v = r.text(), r.text()
            if k.startswith("extra."):
                extra[k[len("extra."):]] = v
            else:
                flat[k] = v
        params: dict[str, np.ndarray] = {}
        for _ in range(r.u32()):
            name = r.text()
            if name in params:
                raise FormatError(f"duplicate tensor {name!r}")
            shape = tuple(r.u64() for _ in range(r.u32()))
            count = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        r.done()
        try:
            config = ModelConfig.from_flat(flat)
        except (KeyError, TypeError, ValueError, SyntaxError) as e:
            raise FormatError(f"bad config block: {e}") from e
        return cls(config, params, extra)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_checkpoint(path, model: WeiADNet, extra: dict[str, str] | None = None) -> str:
    """Write a checkpoint; returns the sha256 of the bytes written."""
    data = Checkpoint.from_model(model, extra).to_bytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path) -> WeiADNet:
    return Checkpoint.load(path).build_model()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- heatmaps --------------------------------------------------------------


def to_gray(grid) -> np.ndarray:
    """Min-max scale to 0..255. A constant grid maps to 255 when positive, else 0."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.full(g.shape, 255 if hi > 0 else 0, dtype=np.int64)
    return np.rint(255.0 * (g - lo) / (hi - lo)).astype(np.int64)


def write_pgm(path, grid) -> np.ndarray:
    """ASCII (P2) greymap of ``grid``; returns the written pixel values."""
    px = to_gray(grid)
    h, w = px.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(int(v)) for v in row) for row in px]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    return px


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise FormatError("not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    px = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if px.size != w * h or (px > maxval).any():
        raise FormatError("PGM payload does not match its header")
    return px.reshape(h, w)


def write_grid_csv(path, grid) -> None:
    g = np.asarray(grid, dtype=np.float64)
    with open(path, "w", encoding="ascii", newline="") as f:
        f.write("row,col,value\n")
        for (i, j), v in np.ndenumerate(g):
            f.write(f"{i},{j},{float(v)!r}\n")
