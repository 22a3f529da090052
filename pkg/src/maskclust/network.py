"""Student networks: ViT encoder with registers, cross-attention predictor, EMA.

The encoder is a pre-norm vision transformer with RMS normalization, axial
rotary position embedding on patch tokens, stochastic depth, and no bias
or layerscale parameters. The predictor is a stack of cross-attention
blocks in which mask queries attend to the encoded view but never to each
other, so each prediction is a function of (its coordinate, the context)
alone. The teacher is a second encoder instance updated by exponential
moving average.

Batched array entry points (``*_batch``) carry the training path; the
TokenSet functions below them expose the same operations per image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .masking import PatchMask

PATCH, REGISTER, MASK_QUERY = 0, 1, 2
ROLE_NAMES = {PATCH: "patch", REGISTER: "register", MASK_QUERY: "mask_query"}


@dataclass
class NetworkConfig:
    patch_size: int = 16
    enc_depth: int = 12
    enc_dim: int = 768
    enc_heads: int = 12
    pred_depth: int | None = None  # defaults to enc_depth // 2
    pred_dim: int | None = None
    pred_heads: int | None = None
    n_reg: int = 16
    mlp_ratio: float = 4.0
    stochastic_depth: float = 0.2
    rope_freq_min: float = 7e-4
    rope_freq_max: float = 7.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.pred_depth is None:
            self.pred_depth = self.enc_depth // 2
        if self.pred_dim is None:
            self.pred_dim = self.enc_dim
        if self.pred_heads is None:
            self.pred_heads = self.enc_heads
        if self.enc_dim % self.enc_heads != 0:
            raise ValueError("enc_dim must be divisible by enc_heads")
        if self.pred_dim % self.pred_heads != 0:
            raise ValueError("pred_dim must be divisible by pred_heads")
        for hd in (self.enc_dim // self.enc_heads, self.pred_dim // self.pred_heads):
            if hd % 4 != 0:
                raise ValueError(f"head dim {hd} must be divisible by 4 for axial rope")
        if self.n_reg < 0:
            raise ValueError("n_reg must be >= 0")
        if not 0.0 <= self.stochastic_depth < 1.0:
            raise ValueError("stochastic_depth must lie in [0, 1)")


@dataclass
class TokenSet:
    """Ordered token vectors with lattice coordinates and role tags.

    coords are float (count, 2); tokens without a lattice position
    (registers, global queries) carry NaN. roles are int8 with values
    PATCH, REGISTER, MASK_QUERY.
    """

    vectors: np.ndarray
    coords: np.ndarray
    roles: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.roles = np.asarray(self.roles, dtype=np.int8)
        if not (len(self.vectors) == len(self.coords) == len(self.roles)):
            raise ValueError("vectors, coords and roles must have matching counts")

    def __len__(self):
        return len(self.vectors)


def lattice_coords(rows: int, cols: int) -> np.ndarray:
    """(rows * cols, 2) array of (row, col) pairs in raster order."""
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1).astype(np.float64)


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, n, patch_size**2 * 3) flattened patches, raster order."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    x = images.reshape(b, rows, patch_size, cols, patch_size, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, rows * cols, patch_size * patch_size * c)


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, hidden, eps, rng):
        self.norm1 = nn.RMSNorm(dim, eps)
        self.attn = nn.MultiHeadAttention(dim, heads, rng)
        self.norm2 = nn.RMSNorm(dim, eps)
        self.mlp = nn.Mlp(dim, hidden, rng)

    def forward(self, x, rot, dp1, dp2):
        xn = self.norm1.forward(x)
        x = x + dp1 * self.attn.forward(xn, xn, rot, rot)
        x = x + dp2 * self.mlp.forward(self.norm2.forward(x))
        self._dp = (dp1, dp2)
        return x

    def backward(self, dy):
        dp1, dp2 = self._dp
        dxn2 = self.mlp.backward(dy * dp2)
        dx = dy + self.norm2.backward(dxn2)
        dq, dkv = self.attn.backward(dx * dp1)
        return dx + self.norm1.backward(dq + dkv)


class Encoder(nn.Module):
    """ViT encoder; holds the patch embedding, registers, blocks, final norm."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        c = config
        in_dim = c.patch_size * c.patch_size * 3
        self.patch_embed = nn.Linear(in_dim, c.enc_dim, rng)
        self.registers = nn.Param(nn.trunc_normal((c.n_reg, c.enc_dim), rng))
        hidden = int(round(c.enc_dim * c.mlp_ratio))
        self.blocks = [
            EncoderBlock(c.enc_dim, c.enc_heads, hidden, c.norm_eps, rng)
            for _ in range(c.enc_depth)
        ]
        self.final_norm = nn.RMSNorm(c.enc_dim, c.norm_eps)
        self._config = c

    @property
    def config(self) -> NetworkConfig:
        return self._config

    # -- patch embedding ------------------------------------------------

    def embed_batch(self, images: np.ndarray):
        """Embed all patches of a batch; returns (tokens (B,n,D), coords (B,n,2))."""
        c = self._config
        tokens = self.patch_embed.forward(extract_patches(images, c.patch_size))
        rows = images.shape[1] // c.patch_size
        cols = images.shape[2] // c.patch_size
        coords = np.broadcast_to(
            lattice_coords(rows, cols), (images.shape[0], rows * cols, 2)
        ).copy()
        return tokens, coords

    def embed_backward(self, dtokens: np.ndarray) -> None:
        self.patch_embed.backward(dtokens)

    # -- transformer ----------------------------------------------------

    def forward_batch(self, tokens, coords, train=False, rng=None):
        """Run the blocks over patch tokens plus appended registers.

        tokens: (B, T, D) embedded patches; coords: (B, T, 2). Returns
        (B, T + n_reg, D), patches first (input order), registers last.
        """
        if tokens.shape[1] == 0:
            raise ValueError("encoder requires at least one patch token")
        c = self._config
        b, t, _ = tokens.shape
        reg = np.broadcast_to(self.registers.value, (b, c.n_reg, c.enc_dim))
        x = np.concatenate([tokens, reg], axis=1)
        full_coords = np.concatenate([coords, np.zeros((b, c.n_reg, 2))], axis=1)
        rope_on = np.concatenate(
            [np.ones((b, t), bool), np.zeros((b, c.n_reg), bool)], axis=1
        )
        rot = nn.rope_cos_sin(
            full_coords, rope_on, c.enc_dim // c.enc_heads, c.rope_freq_min, c.rope_freq_max
        )
        for blk in self.blocks:
            dp1 = nn.drop_path_mask(b, c.stochastic_depth, train, rng)
            dp2 = nn.drop_path_mask(b, c.stochastic_depth, train, rng)
            x = blk.forward(x, rot, dp1, dp2)
        self._t = t
        return self.final_norm.forward(x)

    def backward_batch(self, dout: np.ndarray) -> np.ndarray:
        """Backprop through blocks and registers; returns d(patch tokens)."""
        d = self.final_norm.backward(dout)
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        self.registers.grad += d[:, self._t :].sum(axis=0)
        return d[:, : self._t]


class PredictorBlock(nn.Module):
    def __init__(self, dim, heads, hidden, eps, ctx_dim, rng):
        self.norm1 = nn.RMSNorm(dim, eps)
        self.attn = nn.MultiHeadAttention(dim, heads, rng, kv_dim=ctx_dim)
        self.norm2 = nn.RMSNorm(dim, eps)
        self.mlp = nn.Mlp(dim, hidden, rng)

    def forward(self, x, ctx, rot_q, rot_ctx, dp1, dp2):
        x = x + dp1 * self.attn.forward(self.norm1.forward(x), ctx, rot_q, rot_ctx)
        x = x + dp2 * self.mlp.forward(self.norm2.forward(x))
        self._dp = (dp1, dp2)
        return x

    def backward(self, dy):
        dp1, dp2 = self._dp
        dx = dy + self.norm2.backward(self.mlp.backward(dy * dp2))
        dq, dctx = self.attn.backward(dx * dp1)
        return dx + self.norm1.backward(dq), dctx


class Predictor(nn.Module):
    """Pure cross-attention predictor over learned mask queries.

    Queries start as one shared learned embedding; their position enters
    only through the rotary tables inside each cross-attention. Queries
    never attend to each other.
    """

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        c = config
        self.mask_token = nn.Param(nn.trunc_normal((c.pred_dim,), rng))
        hidden = int(round(c.pred_dim * c.mlp_ratio))
        self.blocks = [
            PredictorBlock(c.pred_dim, c.pred_heads, hidden, c.norm_eps, c.enc_dim, rng)
            for _ in range(c.pred_depth)
        ]
        self.final_norm = nn.RMSNorm(c.pred_dim, c.norm_eps)
        self._config = c

    @property
    def config(self) -> NetworkConfig:
        return self._config

    def forward_batch(
        self, query_coords, ctx, ctx_coords, ctx_rope_on, train=False, rng=None, depth=None
    ):
        """query_coords: (B, m, 2); ctx: (B, Tc, D_enc). Returns (B, m, D_pred).

        ``depth`` limits how many blocks run (used by predictor pooling);
        the final norm is applied only on the full stack.
        """
        if ctx.shape[1] == 0:
            raise ValueError("predictor requires a nonempty context")
        if query_coords.shape[1] == 0:
            raise ValueError("predictor requires at least one query")
        c = self._config
        b, m, _ = query_coords.shape
        hd = c.pred_dim // c.pred_heads
        rot_q = nn.rope_cos_sin(
            query_coords, np.ones((b, m), bool), hd, c.rope_freq_min, c.rope_freq_max
        )
        rot_ctx = nn.rope_cos_sin(ctx_coords, ctx_rope_on, hd, c.rope_freq_min, c.rope_freq_max)
        x = np.broadcast_to(self.mask_token.value, (b, m, c.pred_dim)).copy()
        blocks = self.blocks if depth is None else self.blocks[:depth]
        for blk in blocks:
            dp1 = nn.drop_path_mask(b, c.stochastic_depth, train, rng)
            dp2 = nn.drop_path_mask(b, c.stochastic_depth, train, rng)
            x = blk.forward(x, ctx, rot_q, rot_ctx, dp1, dp2)
        if depth is None:
            x = self.final_norm.forward(x)
        self._ctx_shape = ctx.shape
        return x

    def backward_batch(self, dout: np.ndarray) -> np.ndarray:
        """Backprop through all blocks; returns d(context)."""
        d = self.final_norm.backward(dout)
        dctx = np.zeros(self._ctx_shape)
        for blk in reversed(self.blocks):
            d, dc = blk.backward(d)
            dctx += dc
        self.mask_token.grad += d.sum(axis=(0, 1))
        return dctx

    def first_attention_states(self, query_coords, ctx, ctx_coords, ctx_rope_on):
        """Residual-stream state right after the first cross-attention
        sublayer, before its MLP; used for global pooling. Eval path only."""
        c = self._config
        b, m, _ = query_coords.shape
        hd = c.pred_dim // c.pred_heads
        rot_q = nn.rope_cos_sin(
            query_coords, np.ones((b, m), bool), hd, c.rope_freq_min, c.rope_freq_max
        )
        rot_ctx = nn.rope_cos_sin(ctx_coords, ctx_rope_on, hd, c.rope_freq_min, c.rope_freq_max)
        x = np.broadcast_to(self.mask_token.value, (b, m, c.pred_dim)).copy()
        blk = self.blocks[0]
        return x + blk.attn.forward(blk.norm1.forward(x), ctx, rot_q, rot_ctx)


def build_student(config: NetworkConfig, rng: np.random.Generator):
    """Fresh (encoder, predictor) pair. Construction order is pinned so a
    given seed always yields the same weights."""
    return Encoder(config, rng), Predictor(config, rng)


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> nn.Module:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place.

    Applies to encoder parameters only by construction: the teacher is an
    Encoder and must mirror the student encoder's parameter tree exactly.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    t_params = list(teacher.named_params())
    s_params = list(student.named_params())
    if [n for n, _ in t_params] != [n for n, _ in s_params]:
        raise ValueError("teacher and student parameter trees differ")
    for (_, tp), (_, sp) in zip(t_params, s_params):
        if tp.value.shape != sp.value.shape:
            raise ValueError("teacher and student parameter shapes differ")
        tp.value *= momentum
        tp.value += (1.0 - momentum) * sp.value
    return teacher


# -- per-image TokenSet operations -------------------------------------------


def patchify(image: np.ndarray, encoder: Encoder) -> TokenSet:
    """Embed one (H, W, 3) image into patch tokens with raster-order coords."""
    tokens, coords = encoder.embed_batch(image[None])
    return TokenSet(tokens[0], coords[0], np.full(tokens.shape[1], PATCH, np.int8))


def drop_patches(tokens: TokenSet, mask: PatchMask) -> TokenSet:
    """Keep only tokens whose mask cell is False; coords are preserved."""
    rows, cols = mask.grid.shape
    if len(tokens) != rows * cols:
        raise ValueError(
            f"token count {len(tokens)} does not match mask lattice {rows}x{cols}"
        )
    if np.any(tokens.coords[:, 0] >= rows) or np.any(tokens.coords[:, 1] >= cols):
        raise ValueError("token coords lie outside the mask lattice")
    flat = tokens.coords[:, 0].astype(int) * cols + tokens.coords[:, 1].astype(int)
    keep = ~mask.grid.reshape(-1)[flat]
    return TokenSet(tokens.vectors[keep], tokens.coords[keep], tokens.roles[keep])


def encode(
    tokens: TokenSet, encoder: Encoder, mode: str = "eval", rng: np.random.Generator | None = None
) -> TokenSet:
    """Encode patch tokens; output is patches (input order) then registers."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if np.any(tokens.roles != PATCH):
        raise ValueError("encode expects patch tokens only")
    out = encoder.forward_batch(
        tokens.vectors[None], tokens.coords[None], train=(mode == "train"), rng=rng
    )[0]
    n_reg = encoder.config.n_reg
    coords = np.concatenate([tokens.coords, np.full((n_reg, 2), np.nan)])
    roles = np.concatenate([tokens.roles, np.full(n_reg, REGISTER, np.int8)])
    return TokenSet(out, coords, roles)


def mask_queries(coords: np.ndarray) -> TokenSet:
    """A TokenSet of mask queries at the given (m, 2) target coordinates.

    Query vectors are placeholders; the predictor substitutes its learned
    mask embedding.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return TokenSet(
        np.zeros((len(coords), 0)), coords, np.full(len(coords), MASK_QUERY, np.int8)
    )


def predict(
    queries: TokenSet,
    context: TokenSet,
    predictor: Predictor,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> TokenSet:
    """Predict one output vector per mask query by cross-attending to context."""
    if np.any(queries.roles != MASK_QUERY):
        raise ValueError("predict expects mask_query tokens as queries")
    ctx_rope_on = context.roles == PATCH
    ctx_coords = np.where(ctx_rope_on[:, None], np.nan_to_num(context.coords), 0.0)
    out = predictor.forward_batch(
        queries.coords[None],
        context.vectors[None],
        ctx_coords[None],
        ctx_rope_on[None],
        train=(mode == "train"),
        rng=rng,
    )[0]
    return TokenSet(out, queries.coords, queries.roles)


def rope_rotate(vectors: np.ndarray, coords: np.ndarray, config: NetworkConfig) -> np.ndarray:
    """Apply the axial rotary embedding to per-head vectors (..., head_dim).

    The frequency convention is documented in nn.rope_cos_sin.
    """
    coords = np.asarray(coords, dtype=np.float64)
    cos, sin = nn.rope_cos_sin(
        coords,
        np.ones(coords.shape[:-1], bool),
        vectors.shape[-1],
        config.rope_freq_min,
        config.rope_freq_max,
    )
    return nn.rope_apply(vectors, cos, sin)
