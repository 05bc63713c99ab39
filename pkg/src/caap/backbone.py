"""Desk-scale 1-D CNN classifiers split into a feature extractor and a linear head."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHS = ("mini_fcn", "mini_resnet1d")

_MAGIC = b"CAAPCKPT"
_VERSION = 1


def _uniform(gen: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    a = np.sqrt(1.0 / fan_in)
    return Tensor(gen.uniform(-a, a, size=shape), requires_grad=True)


class ConvLayer:
    def __init__(self, gen, c_in: int, c_out: int, k: int, stride: int = 1):
        self.stride = stride
        self.padding = (k - 1) // 2
        self.w = _uniform(gen, (c_out, c_in, k), c_in * k)
        self.b = _uniform(gen, (c_out, 1), c_in * k)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.w, stride=self.stride, padding=self.padding) + self.b

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class Linear:
    def __init__(self, gen, d_in: int, d_out: int):
        self.w = _uniform(gen, (d_in, d_out), d_in)
        self.b = _uniform(gen, (d_out,), d_in)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class Backbone:
    """Feature extractor ``F`` plus linear classifier ``g``.

    Subclasses build ``self.layers`` (dict name -> layer) in construction order
    and implement ``_trunk``. ``features`` ends with global average pooling.
    """

    arch = ""

    def __init__(self, in_channels: int, num_classes: int, feature_dim: int, seed: int):
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.seed = seed
        self.gen = np.random.default_rng(seed)
        self.layers: dict = {}

    def _finish(self) -> None:
        self.head = Linear(self.gen, self.feature_dim, self.num_classes)
        self.layers["head"] = self.head
        del self.gen

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, layer in self.layers.items():
            out.append((f"{name}.w", layer.w))
            out.append((f"{name}.b", layer.b))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def feature_params(self) -> list[Tensor]:
        return [p for n, p in self.named_params() if not n.startswith("head.")]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def features(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise T.ShapeError(f"expected (N, {self.in_channels}, L) input, got {x.shape}")
        return T.global_avg_pool(self._trunk(x))

    def logits(self, f: Tensor) -> Tensor:
        f = T.as_tensor(f)
        if f.ndim != 2 or f.shape[1] != self.feature_dim:
            raise T.ShapeError(f"expected (N, {self.feature_dim}) features, got {f.shape}")
        return self.head(f)

    def __call__(self, x) -> Tensor:
        return self.logits(self.features(x))

    def _trunk(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        preds = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                preds.append(self(x[i : i + batch_size]).data.argmax(axis=1))
        return np.concatenate(preds)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_params():
            if state[n].shape != p.shape:
                raise T.ShapeError(f"{n}: checkpoint shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=T.DTYPE)


class MiniFCN(Backbone):
    arch = "mini_fcn"

    def __init__(self, in_channels: int, num_classes: int, seed: int = 0):
        super().__init__(in_channels, num_classes, 32, seed)
        self.layers["conv1"] = ConvLayer(self.gen, in_channels, 16, 7, stride=2)
        self.layers["conv2"] = ConvLayer(self.gen, 16, 32, 5)
        self.layers["conv3"] = ConvLayer(self.gen, 32, 32, 3)
        self._finish()

    def _trunk(self, x):
        for name in ("conv1", "conv2", "conv3"):
            x = self.layers[name](x).relu()
        return x


class MiniResNet1d(Backbone):
    arch = "mini_resnet1d"

    def __init__(self, in_channels: int, num_classes: int, seed: int = 0):
        super().__init__(in_channels, num_classes, 32, seed)
        g = self.gen
        self.layers["stem"] = ConvLayer(g, in_channels, 16, 7, stride=2)
        self.layers["b1c1"] = ConvLayer(g, 16, 16, 5)
        self.layers["b1c2"] = ConvLayer(g, 16, 16, 5)
        self.layers["b2c1"] = ConvLayer(g, 16, 32, 5, stride=2)
        self.layers["b2c2"] = ConvLayer(g, 32, 32, 5)
        self.layers["b2sc"] = ConvLayer(g, 16, 32, 1, stride=2)
        self._finish()

    def _trunk(self, x):
        L = self.layers
        x = L["stem"](x).relu()
        x = (L["b1c2"](L["b1c1"](x).relu()) + x).relu()
        return (L["b2c2"](L["b2c1"](x).relu()) + L["b2sc"](x)).relu()


def build_backbone(arch: str, in_channels: int, num_classes: int, seed: int = 0) -> Backbone:
    if arch == "mini_fcn":
        return MiniFCN(in_channels, num_classes, seed)
    if arch == "mini_resnet1d":
        return MiniResNet1d(in_channels, num_classes, seed)
    raise ValueError(f"unknown backbone arch {arch!r}; choose from {ARCHS}")


def train_step(model: Backbone, opt: T.AdamW, x: np.ndarray, y: np.ndarray, lr: float | None = None) -> float:
    """One AdamW step on the batch cross-entropy; returns the pre-step loss."""
    opt.zero_grad()
    loss = T.cross_entropy(model(x), y)
    T.backward(loss)
    opt.step(lr)
    return loss.item()


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def save_checkpoint(path: str | Path, arch: str, named: Iterable[tuple[str, np.ndarray]], meta: dict[str, int] | None = None) -> None:
    """Layout: magic, version, arch tag, int meta table, shape table, float64 LE payload."""
    named = [(n, np.asarray(a, dtype="<f8")) for n, a in named]
    meta = meta or {}
    buf = bytearray(_MAGIC)
    buf += struct.pack("<I", _VERSION)
    buf += _pack_str(arch)
    buf += struct.pack("<I", len(meta))
    for k in sorted(meta):
        buf += _pack_str(k) + struct.pack("<q", int(meta[k]))
    buf += struct.pack("<I", len(named))
    for name, arr in named:
        buf += _pack_str(name) + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for _, arr in named:
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, int], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<H")
        s = raw[pos : pos + n].decode()
        pos += n
        return s

    (version,) = take("<I")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = take_str()
    (n_meta,) = take("<I")
    meta = {}
    for _ in range(n_meta):
        k = take_str()
        meta[k] = take("<q")[0]
    (n,) = take("<I")
    table = []
    for _ in range(n):
        name = take_str()
        (ndim,) = take("<B")
        table.append((name, take(f"<{ndim}I")))
    arrays = {}
    for name, shape in table:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(T.DTYPE)
        pos += 8 * count
    return arch, meta, arrays


def save_backbone(model: Backbone, path: str | Path) -> None:
    meta = {"in_channels": model.in_channels, "num_classes": model.num_classes}
    save_checkpoint(path, model.arch, model.state().items(), meta)


def load_backbone(path: str | Path) -> Backbone:
    arch, meta, arrays = load_checkpoint(path)
    model = build_backbone(arch, meta["in_channels"], meta["num_classes"])
    model.load_state(arrays)
    return model
