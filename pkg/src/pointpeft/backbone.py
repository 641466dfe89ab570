"""Toy pre-trainable point transformer and its masked-autoencoder objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import geometry as G
from . import tensor as T
from .nn import Bottleneck, LayerNorm, Linear, Module, Parameter
from .tensor import Tensor


@dataclass
class EncoderConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_ratio: int = 4
    tokens: int = 32
    patch_size: int = 16
    num_classes: int = 8
    tokenizer_hidden: int = 32
    tokenizer_width: int = 64
    pos_hidden: int = 32
    head_hidden: int = 64

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} not divisible by heads={self.heads}")
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")

    @classmethod
    def paper_scale(cls, **kw):
        base = dict(depth=12, dim=384, heads=6, tokens=64, patch_size=32, num_classes=15,
                    tokenizer_hidden=128, tokenizer_width=256, pos_hidden=128, head_hidden=128)
        base.update(kw)
        return cls(**base)


@dataclass
class TokenSet:
    feats: Tensor  # (B, K+M, D)
    coords: Tensor  # (B, K+M, 3)
    prompt_len: int = 0


class Tokenizer(Module):
    """Mini-PointNet over FPS/kNN patches of center-relative coordinates."""

    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.fc1 = Linear(3, cfg.tokenizer_hidden, rng, dtype)
        self.fc2 = Linear(cfg.tokenizer_hidden, cfg.tokenizer_width, rng, dtype)
        self.proj = Linear(cfg.tokenizer_width, cfg.dim, rng, dtype)
        self._cfg = cfg

    def patches(self, points: np.ndarray, start=0):
        """Split (B, P, 3) clouds into (B, M, S, 3) relative patches and (B, M, 3) centers."""
        cfg = self._cfg
        if points.shape[1] < cfg.tokens or points.shape[1] < cfg.patch_size:
            raise ValueError(
                f"tokenize: cloud has {points.shape[1]} points, needs >= {max(cfg.tokens, cfg.patch_size)}"
            )
        cidx = G.batch_fps(points, cfg.tokens, start)
        rows = np.arange(points.shape[0])[:, None]
        centers = points[rows, cidx]
        nidx = G.batch_knn(centers, points, cfg.patch_size)
        patch = points[rows[:, :, None], nidx] - centers[:, :, None, :]
        return patch, centers

    def embed(self, patch: np.ndarray) -> Tensor:
        h = T.relu(self.fc1(Tensor(patch)))
        h = T.max(self.fc2(h), axis=-2)
        return self.proj(h)


class Attention(Module):
    """Multi-head self-attention with separate q/k/v/o projections."""

    def __init__(self, dim, heads, rng, dtype):
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.o = Linear(dim, dim, rng, dtype)
        self._heads = heads
        self.last_weights = None  # most recent attention matrix, kept for dumps

    def __call__(self, x: Tensor, q_delta=None, v_delta=None) -> Tensor:
        B, L, D = x.shape
        H = self._heads
        dh = D // H
        q, k, v = self.q(x), self.k(x), self.v(x)
        if q_delta is not None:
            q = T.add(q, q_delta(x))
        if v_delta is not None:
            v = T.add(v, v_delta(x))

        def split(t):
            return T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh)))
        self.last_weights = att.data
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, D))
        return self.o(out)


class FFN(Module):
    def __init__(self, dim, ratio, rng, dtype):
        self.fc1 = Linear(dim, dim * ratio, rng, dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then h + ffn(ln(h))."""

    def __init__(self, dim, heads, ratio, rng, dtype):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FFN(dim, ratio, rng, dtype)

    def attend(self, x, q_delta=None, v_delta=None):
        return T.add(x, self.attn(self.norm1(x), q_delta, v_delta))

    def feed(self, h):
        return self.ffn(self.norm2(h))

    def __call__(self, x):
        h = self.attend(x)
        return T.add(h, self.feed(h))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.tokenizer = Tokenizer(cfg, rng, dtype)
        self.pos = Bottleneck(3, cfg.pos_hidden, rng, dtype, residual=False, d_out=cfg.dim)
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.ffn_ratio, rng, dtype) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim, dtype)
        self._cfg = cfg
        self._dtype = dtype

    def tokenize(self, points: np.ndarray, start=0) -> TokenSet:
        """Patch embeddings (no positional term) and patch centers."""
        patch, centers = self.tokenizer.patches(points, start)
        return TokenSet(self.tokenizer.embed(patch.astype(self._dtype)),
                        Tensor(centers.astype(self._dtype)), 0)

    def embed(self, tokens: TokenSet) -> Tensor:
        return T.add(tokens.feats, self.pos(tokens.coords))

    def forward(self, points: np.ndarray, start=0) -> Tensor:
        """Plain encoder pass: (B, P, 3) -> final normalised (B, M, D)."""
        return self.encode(self.tokenize(points, start))

    def encode(self, tokens: TokenSet) -> Tensor:
        """Blocks and final norm over already tokenized input."""
        x = self.embed(tokens)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def global_feature(x: Tensor) -> Tensor:
    """Mean-pool concatenated with max-pool over token rows: (B, M, D) -> (B, 2D)."""
    return T.concat([T.mean(x, axis=1), T.max(x, axis=1)], axis=-1)


class Head(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.fc1 = Linear(2 * cfg.dim, cfg.head_hidden, rng, dtype)
        self.fc2 = Linear(cfg.head_hidden, cfg.num_classes, rng, dtype)

    def __call__(self, gf):
        return self.fc2(T.gelu(self.fc1(gf)))


class PointTransformer(Module):
    """Encoder + classification head; the unmodified full-fine-tuning model."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, dtype)
        self.head = Head(cfg, rng, dtype)
        self.cfg = cfg
        self.dtype = dtype

    def __call__(self, points, start=0):
        return self.head(global_feature(self.encoder.forward(points, start)))


def backbone_param_count(cfg: EncoderConfig) -> dict:
    """Closed-form parameter counts of the encoder pieces and the head."""
    D, r = cfg.dim, cfg.ffn_ratio
    per_block = (4 * D * D + 4 * D) + (2 * r * D * D + (r + 1) * D) + 4 * D
    tok = (3 * cfg.tokenizer_hidden + cfg.tokenizer_hidden
           + cfg.tokenizer_hidden * cfg.tokenizer_width + cfg.tokenizer_width
           + cfg.tokenizer_width * D + D)
    pos = 3 * cfg.pos_hidden + cfg.pos_hidden + cfg.pos_hidden * D + D
    head = 2 * D * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden * cfg.num_classes + cfg.num_classes
    return {"blocks": cfg.depth * per_block, "tokenizer": tok + pos, "norm": 2 * D, "head": head}


# ---------------------------------------------------------------------------
# masked-autoencoder pre-training


class MAEDecoder(Module):
    """Two-block decoder reconstructing masked patch coordinates."""

    def __init__(self, cfg: EncoderConfig, rng, dtype, depth: int = 2):
        self.mask_token = Parameter(np.zeros(cfg.dim, dtype))
        self.pos = Bottleneck(3, cfg.pos_hidden, rng, dtype, residual=False, d_out=cfg.dim)
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.ffn_ratio, rng, dtype) for _ in range(depth)]
        self.norm = LayerNorm(cfg.dim, dtype)
        self.out = Linear(cfg.dim, 3 * cfg.patch_size, rng, dtype)


def mask_count(tokens: int, ratio: float) -> int:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    return min(tokens - 1, max(1, int(round(ratio * tokens))))


def mae_loss(model: PointTransformer, decoder: MAEDecoder, points: np.ndarray,
             rng: np.random.Generator, mask_ratio: float = 0.6) -> Tensor:
    """Chamfer reconstruction loss of randomly masked patches, averaged."""
    enc = model.encoder
    cfg = model.cfg
    B = points.shape[0]
    start = rng.integers(0, points.shape[1], size=B)
    patch, centers = enc.tokenizer.patches(points, start)
    patch = patch.astype(model.dtype)
    centers = centers.astype(model.dtype)
    M = cfg.tokens
    n_mask = mask_count(M, mask_ratio)
    perm = np.argsort(rng.random((B, M)), axis=1)
    masked, visible = np.sort(perm[:, :n_mask], 1), np.sort(perm[:, n_mask:], 1)
    rows = np.arange(B)[:, None]

    vis_patch = patch[rows, visible]
    x = T.add(enc.tokenizer.embed(vis_patch), enc.pos(Tensor(centers[rows, visible])))
    for blk in enc.blocks:
        x = blk(x)
    x = enc.norm(x)

    mpos = decoder.pos(Tensor(centers[rows, masked]))
    mtok = T.add(mpos, decoder.mask_token)
    vpos = decoder.pos(Tensor(centers[rows, visible]))
    y = T.concat([T.add(x, vpos), mtok], axis=1)
    for blk in decoder.blocks:
        y = blk(y)
    y = T.slice_axis(decoder.norm(y), M - n_mask, M, axis=1)
    pred = T.reshape(decoder.out(y), (B * n_mask, cfg.patch_size, 3))
    target = patch[rows, masked].reshape(B * n_mask, cfg.patch_size, 3)
    return T.mean(G.batch_chamfer(pred, target))
