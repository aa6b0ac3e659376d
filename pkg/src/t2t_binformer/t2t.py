"""Progressive tokens-to-token tokenisation.

An image is soft-split into overlapping windows, each stage re-structuring the
previous tokens into a spatial grid and unfolding it again, so every new token
aggregates a neighbourhood of old ones. Small single-head transformers between
the splits mix the tokens at ``inner_dim``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .codec import BlockParams, encoder_block
from .params import linear_weight
from .tensor import ShapeError, Tensor


class UnsupportedSizeError(ShapeError):
    pass


@dataclass(frozen=True)
class T2TConfig:
    kernel_sizes: tuple[int, ...] = (7, 3, 3)
    strides: tuple[int, ...] = (4, 2, 2)
    paddings: tuple[int, ...] = (2, 1, 1)
    inner_dim: int = 64
    n_inner_heads: int = 1
    encoder_dim: int = 768
    in_channels: int = 3

    @property
    def stages(self):
        return list(zip(self.kernel_sizes, self.strides, self.paddings))

    @property
    def reduction(self) -> int:
        return int(np.prod(self.strides))


@dataclass
class TokenSequence:
    tokens: Tensor
    grid_side: int

    def __post_init__(self):
        n = self.tokens.shape[0]
        if self.tokens.ndim != 2 or self.grid_side * self.grid_side != n:
            raise ShapeError(f"{self.tokens.shape} tokens do not form a {self.grid_side}^2 grid")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class TokenTransformerParams:
    w_in: Tensor
    block: BlockParams


@dataclass
class T2TParams:
    mixers: list[TokenTransformerParams] = field(default_factory=list)
    project: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: T2TConfig) -> "T2TParams":
        mixers = []
        dim = cfg.in_channels
        for k, _, _ in cfg.stages[:-1]:
            dim *= k * k
            mixers.append(TokenTransformerParams(
                w_in=linear_weight(rng, dim, cfg.inner_dim),
                block=BlockParams.init(rng, cfg.inner_dim, cfg.inner_dim),
            ))
            dim = cfg.inner_dim
        dim *= cfg.kernel_sizes[-1] ** 2
        return cls(mixers=mixers, project=linear_weight(rng, dim, cfg.encoder_dim))


def token_count(h: int, w: int, cfg: T2TConfig = T2TConfig()) -> tuple[int, list[int]]:
    """Trace the stage schedule: ``(n_tokens, [side after each stage])``."""
    if h != w or h < 1:
        raise UnsupportedSizeError(f"only positive square inputs are supported, got {h}x{w}")
    sides, side = [], h
    for k, s, p in cfg.stages:
        new_side = T.conv_output_side(side, k, s, p) if side + 2 * p >= k else 0
        # every stage must shrink the grid by exactly its stride
        if new_side < 1 or new_side * s != side:
            raise UnsupportedSizeError(
                f"{h}x{w} does not survive the stage schedule; use a side that is a "
                f"multiple of {cfg.reduction} (e.g. 64, 128, 256)")
        sides.append(new_side)
        side = new_side
    return sides[-1] ** 2, sides


def soft_split(seq: TokenSequence, k: int, s: int, p: int) -> TokenSequence:
    """Tokens -> spatial grid -> overlapping ``k x k`` windows as new tokens."""
    side = seq.grid_side
    grid = T.reshape(T.transpose(seq.tokens), (seq.dim, side, side))
    rows = T.unfold(grid, k, s, p)
    return TokenSequence(rows, T.conv_output_side(side, k, s, p))


def token_transformer(seq: TokenSequence, params: TokenTransformerParams, n_heads: int = 1) -> TokenSequence:
    if seq.dim != params.w_in.shape[0]:
        raise ShapeError(f"token dim {seq.dim} does not match projection {params.w_in.shape}")
    x = seq.tokens @ params.w_in
    return TokenSequence(encoder_block(x, params.block, n_heads), seq.grid_side)


def tokens_to_token(image: Tensor, params: T2TParams, cfg: T2TConfig = T2TConfig()) -> TokenSequence:
    """``C x H x W`` image -> ``n_tokens x encoder_dim`` token sequence."""
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected a {cfg.in_channels} x H x W image, got {image.shape}")
    _, h, w = image.shape
    _, sides = token_count(h, w, cfg)

    (k0, s0, p0), *rest = cfg.stages
    seq = TokenSequence(T.unfold(image, k0, s0, p0), sides[0])
    for mixer, (k, s, p) in zip(params.mixers, rest):
        seq = token_transformer(seq, mixer, cfg.n_inner_heads)
        seq = soft_split(seq, k, s, p)
    return TokenSequence(seq.tokens @ params.project, seq.grid_side)
