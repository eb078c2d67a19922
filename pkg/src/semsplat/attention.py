"""Toy-scale aggregation transformer with attention-weight reuse.

Images are split into non-overlapping patches and linearly embedded; a
stack of grouped-query attention blocks (RMS pre-normalization, GELU
feed-forward) mixes the tokens while caching every block's post-softmax
attention weights.  Those cached weights can then be re-applied to an
externally computed feature map of any width (the lifting step is a plain
row-stochastic matrix product, so it is independent of the feature
dimension), and a 1x1-convolution head decodes per-pixel raw Gaussian
parameters from the mixed tokens.

Production-scale encoder weights are out of scope; dimensions default to
toy values and initializers are provided for experimentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import RAW_GEOM_CHANNELS, RawGaussianParams


@dataclass(frozen=True)
class PatchTokens:
    """Row-major patch tokens (grid_h * grid_w, dim) over a patch grid."""

    tokens: np.ndarray
    grid_h: int
    grid_w: int
    patch_size: int

    def __post_init__(self) -> None:
        tokens = np.ascontiguousarray(np.asarray(self.tokens, dtype=np.float64))
        if tokens.ndim != 2 or tokens.shape[0] != self.grid_h * self.grid_w:
            raise ValueError("token count must equal grid_h * grid_w")
        object.__setattr__(self, "tokens", tokens)

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class BlockWeights:
    """One GQA block: projections, RMS gains and the feed-forward net.

    n_heads query heads share n_kv_heads key/value heads (n_heads must be
    divisible by n_kv_heads); head width is dim // n_heads.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    n_heads: int
    n_kv_heads: int

    def __post_init__(self) -> None:
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        dim = self.wq.shape[0]
        head_dim = dim // self.n_heads
        if dim % self.n_heads != 0:
            raise ValueError("model dim must be divisible by n_heads")
        if self.wq.shape != (dim, self.n_heads * head_dim):
            raise ValueError("wq shape mismatch")
        if self.wk.shape != (dim, self.n_kv_heads * head_dim) or self.wv.shape != self.wk.shape:
            raise ValueError("wk/wv shape mismatch")
        if self.wo.shape != (self.n_heads * head_dim, dim):
            raise ValueError("wo shape mismatch")
        for arr in (self.wq, self.wk, self.wv, self.wo, self.w1, self.w2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("block weights contain non-finite values")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


@dataclass(frozen=True)
class RelPosBias:
    """Learned 2D relative-position bias table indexed by token-grid offsets."""

    table: np.ndarray  # (2h-1, 2w-1)
    grid_h: int
    grid_w: int

    def matrix(self) -> np.ndarray:
        """Dense (T, T) bias with B[i, j] = table[dy + h - 1, dx + w - 1]."""
        h, w = self.grid_h, self.grid_w
        if self.table.shape != (2 * h - 1, 2 * w - 1):
            raise ValueError("bias table shape must be (2h-1, 2w-1)")
        ys, xs = np.divmod(np.arange(h * w), w)
        dy = ys[None, :] - ys[:, None] + h - 1
        dx = xs[None, :] - xs[:, None] + w - 1
        return self.table[dy, dx]


@dataclass
class AttentionCache:
    """Per-block, per-head post-softmax weights saved for semantic lifting.

    Each entry is (n_heads, T, T) with rows summing to 1; the shared
    relative-position bias was already added to the logits before softmax.
    """

    entries: List[np.ndarray] = field(default_factory=list)
    grid_h: int = 0
    grid_w: int = 0
    bias_table: Optional[np.ndarray] = None


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Root-mean-square normalization per token, then elementwise gain."""
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * gain


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def patchify(image_channels: np.ndarray, patch_size: int,
             weight: np.ndarray, bias: Optional[np.ndarray] = None) -> PatchTokens:
    """Split (H, W, C) into non-overlapping P x P patches mapped by a linear layer.

    weight is (P*P*C, d1); tokens come out in row-major patch order.
    """
    img = np.asarray(image_channels, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError("image must be (H, W, C)")
    h, w, c = img.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"patch size {p} does not divide image {h}x{w}")
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape[0] != p * p * c:
        raise ValueError(f"patch projection expects {p * p * c} inputs, got {weight.shape[0]}")
    gh, gw = h // p, w // p
    patches = img.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)
    tokens = patches @ weight
    if bias is not None:
        tokens = tokens + np.asarray(bias, dtype=np.float64)
    return PatchTokens(tokens=tokens, grid_h=gh, grid_w=gw, patch_size=p)


def gqa_block(tokens: PatchTokens, weights: BlockWeights,
              bias_matrix: Optional[np.ndarray] = None) -> Tuple[PatchTokens, np.ndarray]:
    """Pre-norm residual GQA block; returns new tokens and the cached weights.

    x + Attn(RMSNorm(x)) then + FFN(RMSNorm(.)); each group of query heads
    attends with its shared KV head.  The cache entry is the post-softmax
    weight stack (n_heads, T, T) with the bias already included.
    """
    x = tokens.tokens
    if x.shape[1] != weights.dim:
        raise ValueError("token dim does not match block weights")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite tokens")
    t = x.shape[0]
    hd = weights.head_dim
    group = weights.n_heads // weights.n_kv_heads

    normed = rmsnorm(x, weights.attn_gain)
    q = (normed @ weights.wq).reshape(t, weights.n_heads, hd)
    k = (normed @ weights.wk).reshape(t, weights.n_kv_heads, hd)
    v = (normed @ weights.wv).reshape(t, weights.n_kv_heads, hd)

    attn_out = np.empty((t, weights.n_heads, hd), dtype=np.float64)
    cache = np.empty((weights.n_heads, t, t), dtype=np.float64)
    for head in range(weights.n_heads):
        kv = head // group
        logits = q[:, head, :] @ k[:, kv, :].T / np.sqrt(hd)
        if bias_matrix is not None:
            logits = logits + bias_matrix
        probs = softmax(logits, axis=-1)
        cache[head] = probs
        attn_out[:, head, :] = probs @ v[:, kv, :]
    x = x + attn_out.reshape(t, weights.n_heads * hd) @ weights.wo

    normed = rmsnorm(x, weights.ffn_gain)
    x = x + gelu(normed @ weights.w1 + weights.b1) @ weights.w2 + weights.b2

    out = PatchTokens(tokens=x, grid_h=tokens.grid_h, grid_w=tokens.grid_w,
                      patch_size=tokens.patch_size)
    return out, cache


def run_blocks(tokens: PatchTokens, blocks: List[BlockWeights],
               bias: Optional[RelPosBias] = None) -> Tuple[PatchTokens, AttentionCache]:
    """Run the block stack, collecting every block's attention weights."""
    bias_matrix = bias.matrix() if bias is not None else None
    cache = AttentionCache(grid_h=tokens.grid_h, grid_w=tokens.grid_w,
                           bias_table=None if bias is None else bias.table)
    for block in blocks:
        tokens, entry = gqa_block(tokens, block, bias_matrix)
        cache.entries.append(entry)
    return tokens, cache


def reuse_weights(cache: AttentionCache, block: str = "last") -> np.ndarray:
    """Collapse the cache to one row-stochastic (T, T) matrix.

    block="last" takes the final aggregation block; block="mean" averages
    across blocks.  Heads always average post-softmax, which preserves row
    sums of 1.
    """
    if not cache.entries:
        raise ValueError("attention cache is empty")
    if block == "last":
        stacked = cache.entries[-1]
    elif block == "mean":
        stacked = np.mean(np.stack(cache.entries, axis=0), axis=0)
    else:
        raise ValueError("block must be 'last' or 'mean'")
    return stacked.mean(axis=0)


def cross_attn_reuse(cache: AttentionCache, external_features: np.ndarray,
                     block: str = "last") -> np.ndarray:
    """Lift an external feature map with the cached attention weights.

    The operator is W @ f with W the (bias-included) cached softmax weights;
    no projection touches f, so the same weights apply to features of any
    width.
    """
    f = np.asarray(external_features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("external features must be (tokens, d2)")
    weights = reuse_weights(cache, block=block)
    if f.shape[0] != weights.shape[0]:
        raise ValueError(f"token count mismatch: cache has {weights.shape[0]}, features have {f.shape[0]}")
    return weights @ f


def decode_gaussians(tokens: PatchTokens, head_weight: np.ndarray,
                     head_bias: Optional[np.ndarray] = None,
                     feature_dim: int = 0) -> RawGaussianParams:
    """Decode per-pixel raw Gaussian parameters with a 1x1 head.

    Each token yields raw parameters for its P^2 pixels in patch-local
    row-major order; head_weight is (dim, P^2 * C) with
    C = 60 + feature_dim channels per pixel.
    """
    head_weight = np.asarray(head_weight, dtype=np.float64)
    if head_weight.shape[0] != tokens.dim:
        raise ValueError("head input dim does not match tokens")
    p = tokens.patch_size
    channels = RAW_GEOM_CHANNELS + feature_dim
    if head_weight.shape[1] != p * p * channels:
        raise ValueError(f"head must output {p * p * channels} values per token "
                         f"({p}x{p} pixels, {channels} channels)")
    out = tokens.tokens @ head_weight
    if head_bias is not None:
        out = out + np.asarray(head_bias, dtype=np.float64)
    gh, gw = tokens.grid_h, tokens.grid_w
    maps = out.reshape(gh, gw, p, p, channels).transpose(0, 2, 1, 3, 4)
    return RawGaussianParams(data=maps.reshape(gh * p, gw * p, channels),
                             feature_dim=feature_dim)


@dataclass(frozen=True)
class TransformerConfig:
    """Toy architecture defaults; production dimensions are out of scope."""

    patch_size: int = 8
    dim: int = 128
    n_heads: int = 4
    n_kv_heads: int = 2
    n_blocks: int = 4
    ffn_dim: int = 256


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, _ = np.linalg.qr(a)
    q = q[:rows, :cols] if rows >= cols else q[:cols, :rows].T
    return scale * q


def init_block(cfg: TransformerConfig, rng: np.random.Generator) -> BlockWeights:
    """Scaled-orthogonal projections with zeroed output paths (identity at init)."""
    dim, ffn = cfg.dim, cfg.ffn_dim
    hd = dim // cfg.n_heads
    return BlockWeights(
        wq=_orthogonal(rng, dim, cfg.n_heads * hd),
        wk=_orthogonal(rng, dim, cfg.n_kv_heads * hd),
        wv=_orthogonal(rng, dim, cfg.n_kv_heads * hd),
        wo=np.zeros((cfg.n_heads * hd, dim)),
        attn_gain=np.ones(dim),
        ffn_gain=np.ones(dim),
        w1=_orthogonal(rng, dim, ffn),
        b1=np.zeros(ffn),
        w2=np.zeros((ffn, dim)),
        b2=np.zeros(dim),
        n_heads=cfg.n_heads,
        n_kv_heads=cfg.n_kv_heads,
    )


def init_transformer(cfg: TransformerConfig, image_channels: int, grid_h: int, grid_w: int,
                     rng: np.random.Generator):
    """(patch weight, patch bias, blocks, bias table) for a toy aggregator."""
    p = cfg.patch_size
    patch_w = _orthogonal(rng, p * p * image_channels, cfg.dim)
    patch_b = np.zeros(cfg.dim)
    blocks = [init_block(cfg, rng) for _ in range(cfg.n_blocks)]
    bias = RelPosBias(
        table=0.02 * rng.standard_normal((2 * grid_h - 1, 2 * grid_w - 1)),
        grid_h=grid_h, grid_w=grid_w,
    )
    return patch_w, patch_b, blocks, bias
