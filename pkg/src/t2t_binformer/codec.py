"""Pre-norm transformer encoder/decoder stacks and the bridge between them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import linear_bias, linear_weight, ones, zeros
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    enc_layers: int = 12
    dec_layers: int = 1
    n_heads: int = 8
    enc_dim: int = 768
    dec_dim: int = 64
    mlp_dim: int = 2048

    def __post_init__(self):
        for dim in (self.enc_dim, self.dec_dim):
            if dim % self.n_heads:
                raise ConfigError(f"dim {dim} is not divisible by {self.n_heads} heads")


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, mlp_dim: int) -> "BlockParams":
        return cls(
            ln1_gamma=ones(dim), ln1_beta=zeros(dim),
            wq=linear_weight(rng, dim, dim), wk=linear_weight(rng, dim, dim),
            wv=linear_weight(rng, dim, dim), wo=linear_weight(rng, dim, dim),
            ln2_gamma=ones(dim), ln2_beta=zeros(dim),
            mlp_w1=linear_weight(rng, dim, mlp_dim), mlp_b1=linear_bias(rng, dim, mlp_dim),
            mlp_w2=linear_weight(rng, mlp_dim, dim), mlp_b2=linear_bias(rng, mlp_dim, dim),
        )


@dataclass
class CodecParams:
    encoder: list[BlockParams] = field(default_factory=list)
    bridge: Tensor | None = None
    decoder: list[BlockParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: CodecConfig) -> "CodecParams":
        return cls(
            encoder=[BlockParams.init(rng, cfg.enc_dim, cfg.mlp_dim) for _ in range(cfg.enc_layers)],
            bridge=linear_weight(rng, cfg.enc_dim, cfg.dec_dim),
            decoder=[BlockParams.init(rng, cfg.dec_dim, cfg.mlp_dim) for _ in range(cfg.dec_layers)],
        )


def _check_dim(x: Tensor, dim: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what}: expected n x {dim} tokens, got {x.shape}")


def _heads(x: Tensor, p: BlockParams, n_heads: int):
    """Per-head ``(q, k, v)`` slices and the score scale."""
    n, d = x.shape
    if d % n_heads:
        raise ConfigError(f"token dim {d} is not divisible by {n_heads} heads")
    _check_dim(x, p.dim, "attention")
    hd = d // n_heads
    q, k, v = x @ p.wq, x @ p.wk, x @ p.wv
    if n_heads == 1:
        return [(q, k, v)], 1.0 / math.sqrt(hd)
    heads = []
    for h in range(n_heads):
        cols = (slice(None), slice(h * hd, (h + 1) * hd))
        heads.append((q[cols], k[cols], v[cols]))
    return heads, 1.0 / math.sqrt(hd)


def multi_head_attention(x: Tensor, p: BlockParams, n_heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated, then ``@ wo``."""
    heads, scale = _heads(x, p, n_heads)
    outs = [T.attention(qh, kh, vh, scale) for qh, kh, vh in heads]
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
    return merged @ p.wo


def attention_weights(x: Tensor, p: BlockParams, n_heads: int) -> list[np.ndarray]:
    with T.no_grad():
        heads, scale = _heads(x, p, n_heads)
        return [T.softmax(T.scale(qh, scale) @ T.transpose(kh), axis=-1).data for qh, kh, _ in heads]


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    hidden = T.gelu(T.add(x @ p.mlp_w1, p.mlp_b1))
    return T.add(hidden @ p.mlp_w2, p.mlp_b2)


def encoder_block(x: Tensor, p: BlockParams, n_heads: int) -> Tensor:
    """``y = x + MSA(LN(x)); out = y + MLP(LN(y))``."""
    _check_dim(x, p.dim, "encoder_block")
    y = x + multi_head_attention(T.layer_norm(x, p.ln1_gamma, p.ln1_beta), p, n_heads)
    return y + mlp(T.layer_norm(y, p.ln2_gamma, p.ln2_beta), p)


def encode(x: Tensor, params: CodecParams, cfg: CodecConfig) -> Tensor:
    _check_dim(x, cfg.enc_dim, "encode")
    for block in params.encoder:
        x = encoder_block(x, block, cfg.n_heads)
    return x


def bridge(x: Tensor, params: CodecParams, cfg: CodecConfig) -> Tensor:
    _check_dim(x, cfg.enc_dim, "bridge")
    return x @ params.bridge


def decode(x: Tensor, params: CodecParams, cfg: CodecConfig) -> Tensor:
    _check_dim(x, cfg.dec_dim, "decode")
    for block in params.decoder:
        x = encoder_block(x, block, cfg.n_heads)
    return x
