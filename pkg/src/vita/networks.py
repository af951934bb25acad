"""Translator, discriminator and classifier builders plus checkpoint I/O."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    avg_pool,
    batch_norm,
    concat,
    conv2d,
    global_avg_pool,
    instance_norm,
    leaky_relu,
    linear,
    nearest_upsample,
    relu,
    sigmoid,
)

MAGIC = b"VITA"
FORMAT_VERSION = 1


class Module:
    """Parameter container with a JSON-serializable architecture descriptor."""

    kind = "module"

    def __init__(self):
        self._params: Dict[str, Parameter] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self.training = False
        self.step = 0

    def _param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value)
        self._params[name] = p
        return p

    def _conv(self, rng, name: str, cin: int, cout: int, k: int, bias: bool = True):
        std = np.sqrt(2.0 / (cin * k * k))
        w = self._param(f"{name}.weight", rng.standard_normal((cout, cin, k, k)) * std)
        b = self._param(f"{name}.bias", np.zeros(cout)) if bias else None
        return w, b

    def parameters(self):
        return list(self._params.values())

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self._params.items()}
        out.update(self._buffers)
        return out

    def load_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        expected = self.named_tensors()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise DescriptorMismatchError(f"tensor names differ: missing {missing}, unexpected {extra}")
        for name, value in tensors.items():
            if value.shape != expected[name].shape:
                raise DescriptorMismatchError(f"{name}: shape {value.shape} != {expected[name].shape}")
            if name in self._params:
                self._params[name].data = value.astype(np.float32).copy()
            else:
                self._buffers[name][...] = value

    def config(self) -> dict:
        raise NotImplementedError

    def architecture(self) -> dict:
        return {"kind": self.kind, **self.config()}

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def clone(self) -> "Module":
        """Independent copy (no shared arrays), e.g. an attack snapshot."""
        other = type(self)(**self.config())
        other.load_tensors({k: v.copy() for k, v in self.named_tensors().items()})
        other.training = self.training
        other.step = self.step
        return other

    def __call__(self, *args):
        return self.forward(*args)


class UNetTranslator(Module):
    """U-Net mapping ``x + delta`` back to an image in [0, 1].

    Encoder stage ``i`` runs at resolution ``H / 2**i`` and hands its output to
    decoder stage ``i`` through a skip connection. Stage 0 and the last decoder
    conv skip instance norm so absolute intensities survive the round trip.
    """

    kind = "unet_translator"

    def __init__(self, channels: int = 3, depth: int = 3, base_channels: int = 32, seed: int = 0):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.channels, self.depth, self.base_channels, self.seed = channels, depth, base_channels, seed
        rng = np.random.default_rng(seed)
        widths = [base_channels * 2 ** min(i, 2) for i in range(depth + 1)]
        self.widths = widths
        cin = channels
        self.enc = []
        for i in range(depth):
            self.enc.append(self._conv(rng, f"enc{i}", cin, widths[i], 3))
            cin = widths[i]
        self.mid = self._conv(rng, "mid", widths[depth - 1], widths[depth], 3)
        self.dec = []
        for i in reversed(range(depth)):
            self.dec.append(self._conv(rng, f"dec{i}", widths[i + 1] + widths[i], widths[i], 3))
        self.head = self._conv(rng, "head", widths[0], channels, 1)

    def config(self) -> dict:
        return {"channels": self.channels, "depth": self.depth,
                "base_channels": self.base_channels, "seed": self.seed}

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"translator expects [N, {self.channels}, H, W], got {x.shape}")
        m = 2 ** self.depth
        h, w = x.shape[2:]
        if h % m or w % m:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {m}; "
                             f"pad by ({-h % m}, {-w % m}) pixels")

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        self.check_input(x)
        skips = []
        h = x
        for i, (w, b) in enumerate(self.enc):
            if i > 0:
                h = avg_pool(h, 2)
            h = conv2d(h, w, b, padding=1)
            if i > 0:
                h = instance_norm(h)
            h = leaky_relu(h, 0.2)
            skips.append(h)
        h = relu(instance_norm(conv2d(avg_pool(h, 2), *self.mid, padding=1)))
        for j, (w, b) in enumerate(self.dec):
            i = self.depth - 1 - j
            h = concat([nearest_upsample(h, 2), skips[i]], axis=1)
            h = conv2d(h, w, b, padding=1)
            if i > 0:
                h = instance_norm(h)
            h = relu(h)
        return sigmoid(conv2d(h, *self.head))


class PatchDiscriminator(Module):
    """1x1 PatchGAN: every pixel of ``concat(x, candidate)`` is scored alone."""

    kind = "patch_discriminator"

    def __init__(self, channels: int = 3, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.channels, self.hidden, self.seed = channels, hidden, seed
        rng = np.random.default_rng(seed)
        self.c1 = self._conv(rng, "c1", 2 * channels, hidden, 1)
        self.c2 = self._conv(rng, "c2", hidden, 2 * hidden, 1)
        self.c3 = self._conv(rng, "c3", 2 * hidden, 1, 1)

    def config(self) -> dict:
        return {"channels": self.channels, "hidden": self.hidden, "seed": self.seed}

    def logits(self, x, candidate) -> Tensor:
        x, candidate = as_tensor(x), as_tensor(candidate)
        if x.shape != candidate.shape:
            raise ShapeError(f"condition {x.shape} and candidate {candidate.shape} differ")
        h = leaky_relu(conv2d(concat([x, candidate], axis=1), *self.c1), 0.2)
        h = leaky_relu(conv2d(h, *self.c2), 0.2)
        return conv2d(h, *self.c3)

    def forward(self, x, candidate) -> Tensor:
        return sigmoid(self.logits(x, candidate))


class Classifier(Module):
    """Small all-convolutional net: conv-BN-ReLU blocks, two stride-2 stages, GAP, linear."""

    kind = "classifier"

    def __init__(self, channels: int = 3, n_classes: int = 10, width: int = 16, seed: int = 0):
        super().__init__()
        self.channels, self.n_classes, self.width, self.seed = channels, n_classes, width, seed
        rng = np.random.default_rng(seed)
        w = width
        plan = [(channels, w, 3, 1), (w, w, 3, 1), (w, 2 * w, 3, 2),
                (2 * w, 2 * w, 3, 1), (2 * w, 4 * w, 3, 2), (4 * w, 4 * w, 1, 1)]
        self.blocks = []
        for i, (cin, cout, k, stride) in enumerate(plan):
            kernel, _ = self._conv(rng, f"conv{i}", cin, cout, k, bias=False)
            gamma = self._param(f"bn{i}.weight", np.ones(cout))
            beta = self._param(f"bn{i}.bias", np.zeros(cout))
            self._buffers[f"bn{i}.running_mean"] = np.zeros(cout, np.float32)
            self._buffers[f"bn{i}.running_var"] = np.ones(cout, np.float32)
            self.blocks.append((i, kernel, gamma, beta, stride, k // 2))
        self.fc_w = self._param("fc.weight", rng.standard_normal((n_classes, 4 * w)) * np.sqrt(1.0 / (4 * w)))
        self.fc_b = self._param("fc.bias", np.zeros(n_classes))

    def config(self) -> dict:
        return {"channels": self.channels, "n_classes": self.n_classes,
                "width": self.width, "seed": self.seed}

    def forward(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim != 4 or h.shape[1] != self.channels:
            raise ShapeError(f"classifier expects [N, {self.channels}, H, W], got {h.shape}")
        for i, kernel, gamma, beta, stride, pad in self.blocks:
            h = conv2d(h, kernel, None, stride=stride, padding=pad)
            h = batch_norm(h, gamma, beta, self._buffers[f"bn{i}.running_mean"],
                           self._buffers[f"bn{i}.running_var"], self.training)
            h = relu(h)
        return linear(global_avg_pool(h), self.fc_w, self.fc_b)

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits for a raw array, batched, no tape."""
        saved = self.training
        self.training = False
        try:
            chunks = [self.forward(Tensor(x[i:i + batch_size])).data
                      for i in range(0, len(x), batch_size)]
        finally:
            self.training = saved
        return np.concatenate(chunks, axis=0)


def unet_forward(t: UNetTranslator, x) -> Tensor:
    return t.forward(x)


def patchgan_forward(d: PatchDiscriminator, x, candidate) -> Tensor:
    return d.forward(x, candidate)


def classifier_forward(c: Classifier, x) -> Tensor:
    return c.forward(x)


# checkpoints ----------------------------------------------------------------------

BUILDERS = {cls.kind: cls for cls in (UNetTranslator, PatchDiscriminator, Classifier)}


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DescriptorMismatchError(CheckpointError):
    pass


def encode_tensors(descriptor: str, tensors: Dict[str, np.ndarray]) -> bytes:
    """Little-endian container shared by checkpoints and dataset files."""
    desc = descriptor.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(desc)), desc,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes):
    """Inverse of :func:`encode_tensors`; returns ``(descriptor, {name: array})``."""
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedCheckpointError(f"file truncated at byte {len(blob)}; needed {pos + n}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise BadMagicError("not a VITA tensor file (bad magic)")
    version, dlen = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    descriptor = take(dlen).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last tensor")
    return descriptor, tensors


def checkpoint_save(model: Module, path, config_hash: str = "") -> None:
    meta = {"arch": model.architecture(), "step": int(model.step), "config_hash": config_hash}
    blob = encode_tensors(json.dumps(meta, sort_keys=True), model.named_tensors())
    Path(path).write_bytes(blob)


def checkpoint_load(path, expected_kind: Optional[str] = None) -> Module:
    descriptor, tensors = decode_tensors(Path(path).read_bytes())
    meta = json.loads(descriptor)
    arch = dict(meta["arch"])
    kind = arch.pop("kind")
    if expected_kind is not None and kind != expected_kind:
        raise DescriptorMismatchError(f"checkpoint holds {kind!r}, expected {expected_kind!r}")
    if kind not in BUILDERS:
        raise DescriptorMismatchError(f"unknown architecture {kind!r}")
    model = BUILDERS[kind](**arch)
    model.load_tensors(tensors)
    model.step = meta.get("step", 0)
    return model
