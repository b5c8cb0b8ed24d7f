"""Overlapping-patch ViT backbone with a Head Disentangling Block on top.

Token tensors are laid out (batch, tokens, channels); token 0 is the class
token. Attention projections carry no bias, so the concatenate-then-project
output of a block is exactly the sum of its per-head terms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid model or patch configuration."""


class DataError(ValueError):
    """Input data outside what the model was built for (e.g. unknown camera)."""


@dataclass(frozen=True)
class PatchifyConfig:
    height: int
    width: int
    patch: int
    stride: int
    channels: int = 3

    def __post_init__(self):
        if self.patch < 1 or self.stride < 1:
            raise ConfigError(f"patch and stride must be positive, got P={self.patch}, s={self.stride}")
        if self.patch > self.height or self.patch > self.width:
            raise ConfigError(f"patch size {self.patch} exceeds image {self.height}x{self.width}")
        if self.stride > self.patch:
            raise ConfigError(f"stride {self.stride} larger than patch {self.patch} would skip pixels")


def patch_count(cfg: PatchifyConfig) -> tuple[int, int, int]:
    """Grid height, grid width and number of sliding windows."""
    h = (cfg.height - cfg.patch) // cfg.stride + 1
    w = (cfg.width - cfg.patch) // cfg.stride + 1
    return h, w, h * w


def extract_patches(images: np.ndarray, cfg: PatchifyConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, M, P*P*C), windows in row-major order of their top-left corner."""
    if images.ndim != 4 or images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise T.ShapeError(f"expected images of shape (B, {cfg.height}, {cfg.width}, {cfg.channels}), got {images.shape}")
    P, s = cfg.patch, cfg.stride
    win = sliding_window_view(images, (P, P), axis=(1, 2))[:, ::s, ::s]
    # win: (B, h, w, C, P, P) -> (B, h, w, P, P, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    B, h, w = win.shape[:3]
    return np.ascontiguousarray(win.reshape(B, h * w, P * P * cfg.channels))


@dataclass
class ModelConfig:
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 6
    hdb_heads: int = 6
    img_height: int = 64
    img_width: int = 32
    patch: int = 8
    stride: int = 8
    num_cameras: int = 4
    sie_lambda: float = 3.0
    mlp_ratio: int = 4
    enable_hdb: bool = True
    hdb_residual: bool = False
    hdb_ffn: bool = False
    hdb_cls: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        c = self.embed_dim
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if c % self.num_heads:
            raise ConfigError(f"embed_dim {c} not divisible by num_heads {self.num_heads}")
        if self.enable_hdb and c % self.hdb_heads:
            raise ConfigError(f"embed_dim {c} not divisible by hdb_heads {self.hdb_heads}")
        if self.num_cameras < 1:
            raise ConfigError("num_cameras must be >= 1")
        if self.sie_lambda < 0:
            raise ConfigError("sie_lambda must be >= 0")
        self.patchify  # validates geometry

    @property
    def patchify(self) -> PatchifyConfig:
        return PatchifyConfig(self.img_height, self.img_width, self.patch, self.stride)

    @property
    def num_patches(self) -> int:
        return patch_count(self.patchify)[2]

    @property
    def num_parts(self) -> int:
        return self.hdb_heads if self.enable_hdb else 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureSet:
    """Batched model output.

    ``global_feat`` is (B, c); ``parts`` is (B, N, c) or None for the plain
    ViT; ``attn_rows`` is (B, N, M), the class-token attention over image
    tokens for each head of the last block.
    """

    global_feat: Tensor
    parts: Tensor | None
    attn_rows: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def num_parts(self) -> int:
        return 0 if self.parts is None else self.parts.shape[1]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    c, P = cfg.embed_dim, cfg.patch
    hidden = cfg.mlp_ratio * c
    raw: dict[str, np.ndarray] = {}

    def proj(name, shape):
        raw[name] = _trunc_normal(rng, shape, cfg.init_std)

    def norm(prefix):
        raw[prefix + ".gain"] = np.ones(c)
        raw[prefix + ".bias"] = np.zeros(c)

    def mlp(prefix):
        proj(prefix + ".fc1.weight", (c, hidden))
        raw[prefix + ".fc1.bias"] = np.zeros(hidden)
        proj(prefix + ".fc2.weight", (hidden, c))
        raw[prefix + ".fc2.bias"] = np.zeros(c)

    proj("patch_embed.weight", (P * P * 3, c))
    raw["patch_embed.bias"] = np.zeros(c)
    raw["cls_token"] = np.zeros(c)
    raw["pos_embed"] = np.zeros((cfg.num_patches + 1, c))
    raw["sie_embed"] = np.zeros((cfg.num_cameras, c))

    n_std = cfg.depth - 1 if cfg.enable_hdb else cfg.depth
    for i in range(n_std):
        pre = f"blocks.{i}"
        norm(pre + ".norm1")
        proj(pre + ".attn.qkv", (c, 3 * c))
        proj(pre + ".attn.proj", (c, c))
        norm(pre + ".norm2")
        mlp(pre + ".mlp")

    if cfg.enable_hdb:
        N = cfg.hdb_heads
        norm("hdb.norm")
        proj("hdb.qkv", (c, 3 * c))
        proj("hdb.part_proj", (N, c // N, c))
        if cfg.hdb_ffn:
            norm("hdb.norm2")
            mlp("hdb.mlp")
    else:
        norm("norm")

    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}


# ---------------------------------------------------------------- building blocks


def embed(images: np.ndarray, cams, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Patch projection + class token, then position and scaled camera embeddings on every token."""
    cams = np.asarray(cams, dtype=np.int64).reshape(-1)
    if cams.size and (cams.min() < 0 or cams.max() >= cfg.num_cameras):
        raise DataError(f"camera ids {sorted(set(cams.tolist()))} outside [0, {cfg.num_cameras})")
    dtype = params["patch_embed.weight"].dtype
    patches = Tensor(extract_patches(np.asarray(images, dtype=dtype), cfg.patchify))
    B, M = patches.shape[:2]
    if cams.size != B:
        raise DataError(f"{B} images but {cams.size} camera ids")
    c = cfg.embed_dim
    tokens = patches @ params["patch_embed.weight"] + params["patch_embed.bias"]
    cls = T.broadcast_to(params["cls_token"], (B, 1, c))
    z = T.concat([cls, tokens], axis=1) + params["pos_embed"]
    if cfg.sie_lambda != 0:
        side = T.getitem(params["sie_embed"], cams) * cfg.sie_lambda
        z = z + T.broadcast_to(side.reshape(B, 1, c), (B, M + 1, c))
    return z


def _split_heads(x: Tensor, num_heads: int) -> tuple[Tensor, Tensor, Tensor]:
    """(B, T, 3c) -> three (B, heads, T, d) tensors."""
    B, Tn, c3 = x.shape
    d = c3 // (3 * num_heads)
    x = x.reshape(B, Tn, 3, num_heads, d).transpose(2, 0, 3, 1, 4)
    return x[0], x[1], x[2]


def _as_batch(z: Tensor) -> tuple[Tensor, bool]:
    return (z.reshape(1, *z.shape), True) if z.ndim == 2 else (z, False)


def attention_maps(z: Tensor, qkv_w: Tensor, num_heads: int):
    """Scaled dot-product logits per head; returns (logits, q, k, v)."""
    q, k, v = _split_heads(z @ qkv_w, num_heads)
    d = q.shape[-1]
    return (q @ k.T) * (1.0 / math.sqrt(d)), q, k, v


def msa_concat(z: Tensor, qkv_w: Tensor, proj_w: Tensor, num_heads: int) -> Tensor:
    """Heads concatenated along channels, then one c x c projection."""
    z, squeeze = _as_batch(z)
    B, Tn, c = z.shape
    logits, _, _, v = attention_maps(z, qkv_w, num_heads)
    heads = T.softmax(logits) @ v
    out = heads.transpose(0, 2, 1, 3).reshape(B, Tn, c) @ proj_w
    return out.reshape(Tn, c) if squeeze else out


def msa_headsum(z: Tensor, qkv_w: Tensor, proj_w: Tensor, num_heads: int) -> Tensor:
    """Same map as ``msa_concat``, written as a sum of per-head terms a_i V_i W_i
    where W_i is the i-th row block of the projection."""
    z, squeeze = _as_batch(z)
    B, Tn, c = z.shape
    d = c // num_heads
    logits, _, _, v = attention_maps(z, qkv_w, num_heads)
    a = T.softmax(logits)
    out = None
    for i in range(num_heads):
        term = (a[:, i] @ v[:, i]) @ proj_w[i * d : (i + 1) * d]
        out = term if out is None else out + term
    return out.reshape(Tn, c) if squeeze else out


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(x @ params[prefix + ".fc1.weight"] + params[prefix + ".fc1.bias"])
    return h @ params[prefix + ".fc2.weight"] + params[prefix + ".fc2.bias"]


def _norm(x: Tensor, params, prefix: str) -> Tensor:
    return T.layernorm(x, params[prefix + ".gain"], params[prefix + ".bias"])


def transformer_block(z: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int) -> Tensor:
    """Pre-norm block: u = z + MSA(LN(z)); out = u + FFN(LN(u))."""
    u = z + msa_concat(_norm(z, params, prefix + ".norm1"), params[prefix + ".attn.qkv"],
                       params[prefix + ".attn.proj"], num_heads)
    return u + mlp(_norm(u, params, prefix + ".norm2"), params, prefix + ".mlp")


def cls_image_attention(logits: Tensor) -> Tensor:
    """Class-token query against image tokens only: (B, n, T, T) logits -> (B, n, M)."""
    return T.softmax(logits[:, :, 0, 1:])


def hdb_forward(z: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> FeatureSet:
    """Head Disentangling Block.

    Each head's class-token query attends over image tokens only and its value
    aggregate goes through that head's own projection, giving one part feature
    per head. The global feature is the usual concat-projection output of the
    class token over all tokens. Neither path gets a residual or FFN unless
    ``hdb_residual`` / ``hdb_ffn`` are set.
    """
    B, Tn, c = z.shape
    N = cfg.hdb_heads
    d = c // N
    x = _norm(z, params, "hdb.norm")
    logits, _, _, v = attention_maps(x, params["hdb.qkv"], N)
    cls_logits = logits[:, :, 0:1, :]  # (B, N, 1, T)
    w = params["hdb.part_proj"]  # (N, d, c)

    img_attn = T.softmax(cls_logits[..., 1:])  # (B, N, 1, M)
    agg = (img_attn @ v[:, :, 1:, :]).reshape(B, N, d).transpose(1, 0, 2)  # (N, B, d)
    parts = (agg @ w).transpose(1, 0, 2)  # (B, N, c)

    full_attn = T.softmax(cls_logits)
    glob = (full_attn @ v).reshape(B, N * d) @ w.reshape(N * d, c)

    if cfg.hdb_residual:
        z_cls = z[:, 0, :]
        glob = glob + z_cls
        parts = parts + T.broadcast_to(z_cls.reshape(B, 1, c), (B, N, c))
    if cfg.hdb_ffn:
        y = T.concat([glob.reshape(B, 1, c), parts], axis=1)
        y = y + mlp(_norm(y, params, "hdb.norm2"), params, "hdb.mlp")
        glob, parts = y[:, 0, :], y[:, 1:, :]

    attn_rows = img_attn.reshape(B, N, Tn - 1)
    return FeatureSet(global_feat=glob, parts=parts, attn_rows=attn_rows)


# ---------------------------------------------------------------- full model


class PartFormer:
    """Parameters plus forward pass. ``enable_hdb=False`` gives a plain ViT."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed=seed, dtype=dtype)

    @property
    def dtype(self):
        return self.params["patch_embed.weight"].dtype

    def forward(self, images: np.ndarray, cams) -> FeatureSet:
        cfg, p = self.cfg, self.params
        z = embed(images, cams, p, cfg)
        if cfg.enable_hdb:
            for i in range(cfg.depth - 1):
                z = transformer_block(z, p, f"blocks.{i}", cfg.num_heads)
            return hdb_forward(z, p, cfg)

        for i in range(cfg.depth - 1):
            z = transformer_block(z, p, f"blocks.{i}", cfg.num_heads)
        # plain ViT: last block unrolled to keep its class-token attention
        pre = f"blocks.{cfg.depth - 1}"
        x = _norm(z, p, pre + ".norm1")
        logits, _, _, v = attention_maps(x, p[pre + ".attn.qkv"], cfg.num_heads)
        B, Tn, c = z.shape
        heads = T.softmax(logits) @ v
        u = z + heads.transpose(0, 2, 1, 3).reshape(B, Tn, c) @ p[pre + ".attn.proj"]
        z = u + mlp(_norm(u, p, pre + ".norm2"), p, pre + ".mlp")
        glob = _norm(z[:, 0, :], p, "norm")
        return FeatureSet(global_feat=glob, parts=None, attn_rows=cls_image_attention(logits))

    __call__ = forward


def model_forward(image: np.ndarray, cam_id: int, model: PartFormer) -> FeatureSet:
    """Single-image convenience wrapper around ``PartFormer.forward``."""
    return model.forward(np.asarray(image)[None], [cam_id])


def hdb_param_count(params: dict[str, Tensor]) -> int:
    return int(np.sum([t.size for k, t in params.items() if k.startswith("hdb.")]))
