"""MSE objective, AdamW, the training loop and binary checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, TextIO

import numpy as np

from . import tensor as T
from .data import DocumentPair, to_rgb
from .model import ModelConfig, ModelParams, forward_patches, split_patches
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


def mse_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {gt.shape}")
    diff = pred - gt
    return T.mean(T.multiply(diff, diff))


def target_patches(gt: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Ground truth split and flattened the same way as the model output."""
    return split_patches(Tensor(to_rgb(gt.astype(np.float64))[: cfg.channels]), cfg.patch_size)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class TrainConfig:
    lr: float = 1.5e-4
    eps: float = 1e-8
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 200
    seed: int = 42

    def __post_init__(self):
        if not (self.lr > 0 and self.eps > 0):
            raise ValueError("lr and eps must be positive")
        if not 0 <= self.weight_decay < 1:
            raise ValueError("weight_decay must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, Optional[np.ndarray]],
               state: AdamWState, cfg: TrainConfig) -> None:
    """One in-place AdamW update with decoupled weight decay.

    A parameter without a gradient is treated as having a zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} ({bad} entries)")
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    decay = 1.0 - cfg.lr * cfg.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data *= decay
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# loop


@dataclass
class Sample:
    image: Tensor
    target: Tensor


def make_samples(pairs: Sequence[DocumentPair], cfg: ModelConfig) -> list[Sample]:
    out = []
    for p in pairs:
        if p.shape != (cfg.image_size, cfg.image_size):
            raise ShapeError(f"training pairs must be {cfg.image_size}px tiles, got {p.shape}")
        out.append(Sample(Tensor(p.degraded), target_patches(p.gt, cfg)))
    return out


class Trainer:
    """Owns parameters, optimiser state and the seeded batch order."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 samples: Sequence[Sample], params: Optional[ModelParams] = None):
        if not samples:
            raise ValueError("no training samples")
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.samples = list(samples)
        self.params = params if params is not None else ModelParams.init(model_cfg, train_cfg.seed)
        self.named = self.params.named()
        self.state = AdamWState()
        self.rng = np.random.default_rng(train_cfg.seed)
        self.order = np.zeros(0, dtype=np.int64)
        self.cursor = 0
        self.step = 0

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.samples) / self.cfg.batch_size)

    def next_batch(self) -> list[Sample]:
        if self.cursor >= len(self.order):
            self.order = self.rng.permutation(len(self.samples))
            self.cursor = 0
        idx = self.order[self.cursor : self.cursor + self.cfg.batch_size]
        self.cursor += len(idx)
        return [self.samples[i] for i in idx]

    def loss(self, batch: Sequence[Sample]) -> Tensor:
        losses = [mse_loss(forward_patches(s.image, self.params, self.model_cfg), s.target) for s in batch]
        total = losses[0]
        for l in losses[1:]:
            total = total + l
        return T.scale(total, 1.0 / len(losses))

    def train_step(self, batch: Optional[Sequence[Sample]] = None) -> float:
        """forward -> MSE -> backward -> AdamW; returns the batch loss."""
        batch = self.next_batch() if batch is None else batch
        if not batch:
            raise ValueError("empty batch")
        for p in self.named.values():
            p.grad = None
        with T.Tape() as tape:
            loss = self.loss(batch)
            tape.backward(loss)
        grads = {n: p.grad for n, p in self.named.items()}
        adamw_step(self.named, grads, self.state, self.cfg)
        self.step += 1
        return loss.item()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(m * m)) for m in
                             (p.grad for p in self.named.values()) if m is not None))

    def run(self, steps: int, log: Optional[TextIO] = None,
            stop_below: Optional[float] = None) -> list[float]:
        """Train ``steps`` steps, writing ``step,loss,wall_ms`` CSV rows to ``log``."""
        trace = []
        for _ in range(steps):
            t0 = time.perf_counter()
            loss = self.train_step()
            wall = (time.perf_counter() - t0) * 1000.0
            trace.append(loss)
            if log is not None:
                log.write(f"{self.step},{loss!r},{wall:.1f}\n")
                log.flush()
            if self.step % 50 == 0:
                logger.info("step %d loss %.6g", self.step, loss)
            if stop_below is not None and loss <= stop_below:
                break
        return trace

    # checkpoints -----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path, samples: Sequence[Sample]) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.model_cfg, ckpt.train_cfg, samples)
        ckpt.restore(trainer)
        return trainer


# ---------------------------------------------------------------------------
# checkpoint format: b"T2TB", u32 version, u32 metadata length, UTF-8 JSON
# metadata, u32 record count, then per record u32 name length, name, u32 ndim,
# u32 dims..., float64 data. All little-endian.

MAGIC = b"T2TB"
FORMAT_VERSION = 1
LOG_HEADER = "step,loss,wall_ms\n"


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def save_checkpoint(path, trainer: Trainer) -> None:
    meta = {
        "format": FORMAT_VERSION,
        "model": trainer.model_cfg.to_dict(),
        "train": asdict(trainer.cfg),
        "step": trainer.step,
        "adam_t": trainer.state.t,
        "cursor": trainer.cursor,
        "order": [int(i) for i in trainer.order],
        "rng": trainer.rng.bit_generator.state,
    }
    records = [(f"param/{n}", p.data) for n, p in trainer.named.items()]
    records += [(f"adam_m/{n}", a) for n, a in trainer.state.m.items()]
    records += [(f"adam_v/{n}", a) for n, a in trainer.state.v.items()]

    buf = io.BytesIO()
    buf.write(MAGIC)
    raw = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    meta: dict
    arrays: dict[str, np.ndarray]

    def params(self) -> ModelParams:
        params = ModelParams.init(self.model_cfg, seed=0)
        self._fill(params.named(), "param/")
        return params

    def _fill(self, named: dict[str, Tensor], prefix: str) -> None:
        for name, t in named.items():
            arr = self.arrays.get(prefix + name)
            if arr is None:
                raise CheckpointShapeError(f"checkpoint has no array {prefix + name}")
            if arr.shape != t.shape:
                raise CheckpointShapeError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()

    def restore(self, trainer: Trainer) -> None:
        self._fill(trainer.named, "param/")
        state = AdamWState(t=self.meta["adam_t"])
        for name, p in trainer.named.items():
            m, v = self.arrays.get("adam_m/" + name), self.arrays.get("adam_v/" + name)
            if m is None or v is None:
                continue
            if m.shape != p.shape or v.shape != p.shape:
                raise CheckpointShapeError(f"optimizer state for {name} has the wrong shape")
            state.m[name], state.v[name] = m.copy(), v.copy()
        trainer.state = state
        trainer.step = self.meta["step"]
        trainer.cursor = self.meta["cursor"]
        trainer.order = np.asarray(self.meta["order"], dtype=np.int64)
        trainer.rng.bit_generator.state = self.meta["rng"]


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt metadata") from e
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes")

    model_cfg = ModelConfig.from_dict(meta["model"])
    if expect is not None and expect != model_cfg:
        raise CheckpointShapeError(f"{path}: checkpoint model config does not match the requested one")
    ckpt = Checkpoint(model_cfg, TrainConfig(**meta["train"]), meta, arrays)
    # validate against a freshly built model so shape errors surface at load time
    ckpt.params()
    return ckpt
