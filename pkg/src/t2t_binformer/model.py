"""The end-to-end binarisation network.

tokens-to-token -> + positional embedding -> encoder -> bridge -> decoder ->
per-token pixel head -> patch reassembly -> clamp and threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .codec import CodecConfig, CodecParams, bridge, decode, encode
from .params import linear_bias, linear_weight, named_parameters, uniform
from .t2t import T2TConfig, T2TParams, UnsupportedSizeError, token_count, tokens_to_token
from .tensor import ShapeError, Tensor

BINARY_THRESHOLD = 0.5
POS_EMBED_RANGE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 256
    patch_size: int = 16
    channels: int = 3
    t2t: T2TConfig = field(default_factory=T2TConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    def __post_init__(self):
        if self.t2t.encoder_dim != self.codec.enc_dim:
            raise ShapeError("tokenizer output dim must equal the encoder dim")
        if self.t2t.reduction != self.patch_size:
            raise ShapeError(
                f"tokenizer reduction {self.t2t.reduction} must equal patch size {self.patch_size}")
        token_count(self.image_size, self.image_size, self.t2t)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        t2t = {k: tuple(v) if isinstance(v, list) else v for k, v in d["t2t"].items()}
        return cls(image_size=d["image_size"], patch_size=d["patch_size"], channels=d["channels"],
                   t2t=T2TConfig(**t2t), codec=CodecConfig(**d["codec"]))


def preset(name: str, image_size: int = 256) -> ModelConfig:
    """Named model sizes: ``paper`` (full size) and ``toy`` (desk scale)."""
    if name == "paper":
        return ModelConfig(image_size=image_size)
    if name == "toy":
        return ModelConfig(
            image_size=image_size,
            t2t=T2TConfig(inner_dim=8, encoder_dim=32),
            codec=CodecConfig(enc_layers=2, dec_layers=1, n_heads=2, enc_dim=32, dec_dim=128, mlp_dim=256),
        )
    raise ValueError(f"unknown preset {name!r}; choose 'paper' or 'toy'")


PRESETS = ("paper", "toy")


@dataclass
class ModelParams:
    t2t: T2TParams
    pos_embed: Tensor
    codec: CodecParams
    head_w: Tensor
    head_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls(
            t2t=T2TParams.init(rng, cfg.t2t),
            pos_embed=uniform(rng, (cfg.n_patches, cfg.codec.enc_dim), POS_EMBED_RANGE),
            codec=CodecParams.init(rng, cfg.codec),
            head_w=linear_weight(rng, cfg.codec.dec_dim, cfg.patch_dim),
            head_b=linear_bias(rng, cfg.codec.dec_dim, cfg.patch_dim),
        )

    def named(self) -> dict[str, Tensor]:
        return named_parameters(self)


@dataclass
class BinarizationOutput:
    continuous: np.ndarray  # C x H x W in [0, 1]
    binary: np.ndarray  # H x W, 1 = background, 0 = text


def add_positional(x: Tensor, pe: Tensor) -> Tensor:
    if x.shape != pe.shape:
        raise ShapeError(f"positional embedding {pe.shape} does not match tokens {x.shape}")
    return T.add(x, pe)


def pixel_head(tokens: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if tokens.ndim != 2 or tokens.shape[1] != w.shape[0]:
        raise ShapeError(f"pixel head expects n x {w.shape[0]} tokens, got {tokens.shape}")
    return T.add(tokens @ w, b)


def _patch_grid(n: int, h: int, w: int, patch: int) -> tuple[int, int]:
    if h % patch or w % patch:
        raise ShapeError(f"{h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    if gh * gw != n:
        raise ShapeError(f"{n} patches cannot tile {h}x{w} at patch size {patch}")
    return gh, gw


def split_patches(image: Tensor, patch: int) -> Tensor:
    """``C x H x W`` -> ``n x (P*P*C)``, raster order, each row laid out (row, col, channel)."""
    c, h, w = image.shape
    gh, gw = _patch_grid((h // patch) * (w // patch), h, w, patch)

    def fwd(a):
        return a.reshape(c, gh, patch, gw, patch).transpose(1, 3, 2, 4, 0).reshape(gh * gw, -1)

    def bwd(g):
        return g.reshape(gh, gw, patch, patch, c).transpose(4, 0, 2, 1, 3).reshape(c, h, w)

    return T._make(np.ascontiguousarray(fwd(image.data)), (image,), lambda g: (bwd(g),), "split_patches")


def reassemble(patches: Tensor, h: int, w: int, patch: int, channels: int = 3) -> Tensor:
    """Inverse of :func:`split_patches`."""
    n = patches.shape[0]
    if patches.ndim != 2 or patches.shape[1] != patch * patch * channels:
        raise ShapeError(f"patch rows {patches.shape} do not match P={patch}, C={channels}")
    gh, gw = _patch_grid(n, h, w, patch)
    c = channels

    def fwd(a):
        return a.reshape(gh, gw, patch, patch, c).transpose(4, 0, 2, 1, 3).reshape(c, h, w)

    def bwd(g):
        return g.reshape(c, gh, patch, gw, patch).transpose(1, 3, 2, 4, 0).reshape(n, -1)

    return T._make(np.ascontiguousarray(fwd(patches.data)), (patches,), lambda g: (bwd(g),), "reassemble")


def forward_patches(image: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Predicted patch vectors, ``n_patches x (P*P*C)``, before clamping."""
    if image.ndim != 3 or image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise UnsupportedSizeError(
            f"model expects {cfg.channels}x{cfg.image_size}x{cfg.image_size} input, got {image.shape}")
    tokens = tokens_to_token(image, params.t2t, cfg.t2t).tokens
    x = add_positional(tokens, params.pos_embed)
    x = encode(x, params.codec, cfg.codec)
    x = decode(bridge(x, params.codec, cfg.codec), params.codec, cfg.codec)
    return pixel_head(x, params.head_w, params.head_b)


def binarize(continuous: np.ndarray, threshold: float = BINARY_THRESHOLD) -> np.ndarray:
    """Channel mean thresholded: 1 (background) where mean >= threshold."""
    return (continuous.mean(axis=0) >= threshold).astype(np.uint8)


def forward(image: Tensor, params: ModelParams, cfg: ModelConfig) -> BinarizationOutput:
    with T.no_grad():
        patches = forward_patches(image, params, cfg)
    cont = reassemble(patches, cfg.image_size, cfg.image_size, cfg.patch_size, cfg.channels).data
    cont = np.clip(cont, 0.0, 1.0)
    return BinarizationOutput(cont, binarize(cont))


def predict_image(image: np.ndarray, params: ModelParams, cfg: ModelConfig) -> BinarizationOutput:
    """Binarise an arbitrary-size ``C x H x W`` page by tiling at the model size."""
    from .data import merge_tiles, tile_array

    c, h, w = image.shape
    tiles = tile_array(image, cfg.image_size, fill=1.0)
    outs = [(y, x, forward(Tensor(t), params, cfg).continuous) for y, x, t in tiles]
    cont = merge_tiles(outs, c, h, w, cfg.image_size)
    return BinarizationOutput(cont, binarize(cont))


def param_count(params: ModelParams) -> int:
    return sum(t.size for t in params.named().values())


def psnr_continuous(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((pred - gt) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
