"""Encoders and single-query decoders over per-proposal point features.

All modules take features shaped ``(..., N, D)`` so a batch of proposals is
processed in one call. Sublayers are post-norm: ``LN(x + sublayer(x))``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, LayerNorm, Linear, ParameterSet

N_KEYPOINTS = 9


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 3
    ffn_expansion: int = 4
    # "source": A sums to 1 over the 9 keypoints, A^k over the N points.
    # "literal": the transposed convention (A over N, A^k over 9).
    pbc_axes: str = "source"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.ffn_expansion < 1:
            raise ValueError("ffn_expansion must be >= 1")
        if self.pbc_axes not in ("source", "literal"):
            raise ValueError(f"pbc_axes must be 'source' or 'literal', got {self.pbc_axes!r}")


class DecoderScheme(str, enum.Enum):
    STANDARD = "standard"
    CHANNEL_WISE = "channelwise"
    EXTENDED = "extended"


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``(..., N, D)`` -> ``(..., H, N, D/H)``."""
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, n_heads, d // n_heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return ad.permute(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """``(..., H, N, Dh)`` -> ``(..., N, H * Dh)``."""
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = ad.permute(x, axes)
    *lead, n, h, dh = x.shape
    return ad.reshape(x, (*lead, n, h * dh))


class FeedForward:
    """``LN(x + W2 relu(W1 x))``."""

    def __init__(self, params: ParameterSet, name: str, d_model: int, expansion: int):
        self.mlp = MLP(params, f"{name}.mlp", [d_model, d_model * expansion, d_model])
        self.norm = LayerNorm(params, f"{name}.norm", d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.mlp(x))


# -- encoders ------------------------------------------------------------

class SelfAttentionLayer:
    def __init__(self, params: ParameterSet, name: str, cfg: AttentionConfig):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.q = Linear(params, f"{name}.q", d, d)
        self.k = Linear(params, f"{name}.k", d, d)
        self.v = Linear(params, f"{name}.v", d, d)
        self.o = Linear(params, f"{name}.o", d, d)
        self.norm = LayerNorm(params, f"{name}.norm", d)
        self.ffn = FeedForward(params, f"{name}.ffn", d, cfg.ffn_expansion)

    def __call__(self, x: Tensor, weights: list | None = None) -> Tensor:
        q = split_heads(self.q(x), self.n_heads)
        k = split_heads(self.k(x), self.n_heads)
        v = split_heads(self.v(x), self.n_heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = ad.softmax(ad.matmul(q, ad.transpose_last_two(k)) * scale, axis=-1)
        if weights is not None:
            weights.append(attn)
        h = self.norm(x + self.o(merge_heads(ad.matmul(attn, v))))
        return self.ffn(h)


class SelfAttentionEncoder:
    def __init__(self, params: ParameterSet, cfg: AttentionConfig, name: str = "encoder"):
        self.cfg = cfg
        self.layers = [SelfAttentionLayer(params, f"{name}.{i}", cfg) for i in range(cfg.n_layers)]

    def __call__(self, x: Tensor, keypoints: Tensor | None = None, weights: list | None = None):
        for layer in self.layers:
            x = layer(x, weights)
        return x, keypoints


class MLPEncoder:
    """Per-point feed-forward stack with no cross-point interaction."""

    def __init__(self, params: ParameterSet, cfg: AttentionConfig, name: str = "encoder"):
        self.layers = [FeedForward(params, f"{name}.{i}", cfg.d_model, cfg.ffn_expansion)
                       for i in range(cfg.n_layers)]

    def __call__(self, x: Tensor, keypoints: Tensor | None = None, weights: list | None = None):
        for layer in self.layers:
            x = layer(x)
        return x, keypoints


class PBCLayer:
    """Point-to-key bidirectional cross-attention.

    Points and keypoints get their own query/value projections. The N x 9
    correlation ``R = Q Qk^T`` drives both updates, so no N x N matrix exists.
    """

    def __init__(self, params: ParameterSet, name: str, cfg: AttentionConfig):
        d = cfg.d_model
        self.d_model = d
        self.axes = cfg.pbc_axes
        self.q = Linear(params, f"{name}.q", d, d)
        self.v = Linear(params, f"{name}.v", d, d)
        self.qk = Linear(params, f"{name}.qk", d, d)
        self.vk = Linear(params, f"{name}.vk", d, d)
        self.norm = LayerNorm(params, f"{name}.norm", d)
        self.norm_k = LayerNorm(params, f"{name}.norm_k", d)
        self.ffn = FeedForward(params, f"{name}.ffn", d, cfg.ffn_expansion)
        self.ffn_k = FeedForward(params, f"{name}.ffn_k", d, cfg.ffn_expansion)

    def attention(self, f: Tensor, fk: Tensor):
        q, qk = self.q(f), self.qk(fk)
        scale = 1.0 / math.sqrt(self.d_model)
        r = ad.matmul(q, ad.transpose_last_two(qk)) * scale  # (..., N, 9)
        rt = ad.transpose_last_two(r)  # (..., 9, N)
        if self.axes == "source":
            return ad.softmax(r, axis=-1), ad.softmax(rt, axis=-1)
        return ad.softmax(r, axis=-2), ad.softmax(rt, axis=-2)

    def __call__(self, f: Tensor, fk: Tensor, weights: list | None = None):
        if fk.shape[-2] != N_KEYPOINTS:
            raise ad.ShapeError("pbc_layer keypoints", fk.shape, (N_KEYPOINTS, self.d_model))
        a, ak = self.attention(f, fk)
        if weights is not None:
            weights.append((a, ak))
        v, vk = self.v(f), self.vk(fk)
        f_new = self.ffn(self.norm(ad.matmul(a, vk) + v))
        fk_new = self.ffn_k(self.norm_k(ad.matmul(ak, v) + vk))
        return f_new, fk_new


class PBCEncoder:
    def __init__(self, params: ParameterSet, cfg: AttentionConfig, name: str = "encoder"):
        self.cfg = cfg
        self.layers = [PBCLayer(params, f"{name}.{i}", cfg) for i in range(cfg.n_layers)]

    def __call__(self, x: Tensor, keypoints: Tensor | None = None, weights: list | None = None):
        if keypoints is None:
            raise ValueError("PBC encoder needs keypoint features")
        for layer in self.layers:
            x, keypoints = layer(x, keypoints, weights)
        return x, keypoints


# -- decoder -------------------------------------------------------------

class Decoder:
    """Collapse ``(..., N, D)`` encoder output into one ``(..., 1, D)`` proposal feature.

    * standard: multi-head attention of a learned query over the points;
    * channelwise: per-channel softmax over points, compressed by ``s``;
    * extended: as channelwise, with each channel's logits modulated by the
      query-key product repeated across channels.

    ``s`` is stored as logits and passed through a softmax so the compressed
    weights stay a convex combination of the per-channel distributions.
    """

    def __init__(self, params: ParameterSet, d_model: int, scheme: DecoderScheme | str,
                 n_heads: int = 4, name: str = "decoder"):
        self.scheme = DecoderScheme(scheme)
        self.d_model = d_model
        self.n_heads = n_heads if self.scheme is DecoderScheme.STANDARD else 1
        if d_model % self.n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={self.n_heads}")
        self.k = Linear(params, f"{name}.k", d_model, d_model)
        self.v = Linear(params, f"{name}.v", d_model, d_model)
        bound = 1.0 / math.sqrt(d_model)
        self.query = None
        self.s_logits = None
        if self.scheme in (DecoderScheme.STANDARD, DecoderScheme.EXTENDED):
            self.query = params.uniform(f"{name}.query", (1, d_model), bound)
        if self.scheme in (DecoderScheme.CHANNEL_WISE, DecoderScheme.EXTENDED):
            self.s_logits = params.zeros(f"{name}.s", (1, d_model))

    def weights(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(w, softmax_rows)``: the ``(..., 1, N)`` decoding weights and the
        raw softmax output they come from (per head or per channel)."""
        k = self.k(x)
        n, d = x.shape[-2], self.d_model
        if self.scheme is DecoderScheme.STANDARD:
            kh = split_heads(k, self.n_heads)  # (..., H, N, Dh)
            dh = d // self.n_heads
            qh = ad.reshape(self.query, (self.n_heads, 1, dh))
            rows = ad.softmax(ad.matmul(qh, ad.transpose_last_two(kh)) * (1.0 / math.sqrt(dh)), axis=-1)
            return rows, rows  # (..., H, 1, N)
        kt = ad.transpose_last_two(k)  # (..., D, N)
        if self.scheme is DecoderScheme.EXTENDED:
            global_row = ad.matmul(self.query, kt)  # (..., 1, N)
            kt = ad.broadcast_row(global_row, d) * kt
        rows = ad.softmax(kt * (1.0 / math.sqrt(d)), axis=-1)  # (..., D, N)
        s = ad.softmax(self.s_logits, axis=-1)
        return ad.matmul(s, rows), rows

    def __call__(self, x: Tensor, return_weights: bool = False):
        w, rows = self.weights(x)
        v = self.v(x)
        if self.scheme is DecoderScheme.STANDARD:
            y = merge_heads(ad.matmul(w, split_heads(v, self.n_heads)))
        else:
            y = ad.matmul(w, v)
        return (y, rows) if return_weights else y


# -- functional entry points --------------------------------------------

def self_attention_encode(f: Tensor, encoder: SelfAttentionEncoder) -> Tensor:
    return encoder(f)[0]


def pbc_layer(f: Tensor, fk: Tensor, layer: PBCLayer) -> tuple[Tensor, Tensor]:
    return layer(f, fk)


def pbc_encode(f: Tensor, fk: Tensor, encoder: PBCEncoder) -> tuple[Tensor, Tensor]:
    return encoder(f, fk)


def decode(x: Tensor, decoder: Decoder) -> Tensor:
    return decoder(x)
