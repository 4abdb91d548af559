"""Self-attention variants and the Transformer layer of the context network.

Two attention flavours are implemented: standard multi-head attention and
a relative-position form that keeps content and position projections
separate, combining content-to-content, content-to-position, and
position-to-content terms. Relative offsets are clamped to a window
``[-k, k]``; the row index into the position table is
``clamp(i - j, -k, k) + k``. Scores of the relative-position form are
scaled by ``1/sqrt(3 * head_dim)`` (three additive terms instead of one).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import init
from . import tensor as tt
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class AttentionParams:
    """Content projections of one attention block; d must divide by heads."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor
    heads: int

    @property
    def dim(self):
        return self.w_q.shape[0]

    @property
    def head_dim(self):
        return self.dim // self.heads

    def named_params(self, prefix=""):
        names = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_out", "b_out"]
        return [(prefix + n, getattr(self, n)) for n in names]


@dataclass
class RelPosParams:
    """Relative-position table and projections, shared across all layers."""

    table: Tensor  # (2k+1, d)
    w_qp: Tensor
    b_qp: Tensor
    w_kp: Tensor
    b_kp: Tensor
    max_offset: int

    def named_params(self, prefix=""):
        names = ["table", "w_qp", "b_qp", "w_kp", "b_kp"]
        return [(prefix + n, getattr(self, n)) for n in names]


@dataclass
class DisentangledParams:
    content: AttentionParams
    rel: RelPosParams

    @property
    def heads(self):
        return self.content.heads

    @property
    def head_dim(self):
        return self.content.head_dim


def init_attention(d, heads, rng, dtype=np.float32) -> AttentionParams:
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by heads {heads}")
    def lin():
        return init.trunc_normal(rng, (d, d), dtype=dtype), init.zeros((d,), dtype=dtype)
    w_q, b_q = lin()
    w_k, b_k = lin()
    w_v, b_v = lin()
    w_out, b_out = lin()
    return AttentionParams(w_q, b_q, w_k, b_k, w_v, b_v, w_out, b_out, heads)


def init_rel_pos(d, max_offset, rng, dtype=np.float32) -> RelPosParams:
    table = init.trunc_normal(rng, (2 * max_offset + 1, d), dtype=dtype)
    w_qp = init.trunc_normal(rng, (d, d), dtype=dtype)
    w_kp = init.trunc_normal(rng, (d, d), dtype=dtype)
    return RelPosParams(table, w_qp, init.zeros((d,), dtype=dtype),
                        w_kp, init.zeros((d,), dtype=dtype), max_offset)


def relative_position_index(t, max_offset):
    """delta(i, j) = clamp(i - j, -k, k) + k as a row index into the table."""
    offs = np.arange(t)[:, None] - np.arange(t)[None, :]
    return np.clip(offs, -max_offset, max_offset) + max_offset


def _split_heads(x, heads):
    # [.., T, d] -> [.., h, T, dh]
    *lead, t, d = x.shape
    dh = d // heads
    x = tt.reshape(x, (*lead, t, heads, dh))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return tt.transpose(x, axes)


def _merge_heads(x):
    # [.., h, T, dh] -> [.., T, d]
    *lead, h, t, dh = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return tt.reshape(tt.transpose(x, axes), (*lead, t, h * dh))


def _project(x, w, b):
    return tt.add_bias(tt.matmul(x, w), b, axis=-1)


def multi_head_attention(x: Tensor, params: AttentionParams, mask=None,
                         scale: Optional[float] = None) -> Tensor:
    """softmax(Q K^T * scale) V per head, concatenated and output-projected.

    ``x`` is [T, d] or [B, T, d]; ``mask`` is an optional additive [T, T]
    array (e.g. -inf to forbid a key). Default scale is 1/sqrt(head_dim).
    """
    if scale is None:
        scale = 1.0 / np.sqrt(params.head_dim)
    q = _split_heads(_project(x, params.w_q, params.b_q), params.heads)
    k = _split_heads(_project(x, params.w_k, params.b_k), params.heads)
    v = _split_heads(_project(x, params.w_v, params.b_v), params.heads)
    nd = q.ndim
    scores = tt.scale(tt.matmul(q, tt.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))), scale)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=scores.dtype), scores.shape)
        scores = tt.add(scores, Tensor(m))
    attn = tt.softmax(scores, axis=-1)
    out = _merge_heads(tt.matmul(attn, v))
    return _project(out, params.w_out, params.b_out)


def _disentangled_scores(x: Tensor, params: DisentangledParams) -> Tensor:
    """Unscaled per-head score matrix of the three-term relative-position form."""
    content, rel = params.content, params.rel
    heads = content.heads
    t = x.shape[-2]
    qc = _split_heads(_project(x, content.w_q, content.b_q), heads)
    kc = _split_heads(_project(x, content.w_k, content.b_k), heads)
    qp = _split_heads(_project(rel.table, rel.w_qp, rel.b_qp), heads)  # [h, R, dh]
    kp = _split_heads(_project(rel.table, rel.w_kp, rel.b_kp), heads)

    nd = qc.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    c2c = tt.matmul(qc, tt.transpose(kc, swap))  # [.., h, T, T]

    delta = relative_position_index(t, rel.max_offset)
    lead = qc.ndim - 3  # batch axes before the head axis

    # content-to-position: rows indexed by query, columns gathered at delta(i, j)
    c2p_all = tt.matmul(qc, _bcast_lead(tt.transpose(kp, (0, 2, 1)), lead, c2c.shape[:lead]))
    idx_c2p = np.broadcast_to(delta[None, ...], (1,) * lead + (1, t, t))
    c2p = tt.take_along(c2p_all, np.broadcast_to(idx_c2p, c2c.shape), axis=c2c.ndim - 1)

    # position-to-content: rows gathered at delta(i, j), columns indexed by key
    p2c_all = tt.matmul(_bcast_lead(qp, lead, c2c.shape[:lead]), tt.transpose(kc, swap))
    p2c = tt.take_along(p2c_all, np.broadcast_to(idx_c2p, c2c.shape), axis=c2c.ndim - 2)

    return tt.add(tt.add(c2c, c2p), p2c)


def _bcast_lead(x, lead, lead_shape):
    """Tile a [h, A, B] tensor across leading batch axes (no-op when lead=0)."""
    if lead == 0:
        return x
    reps = int(np.prod(lead_shape))
    tiled = tt.concat([tt.reshape(x, (1,) + x.shape)] * reps, axis=0)
    return tt.reshape(tiled, tuple(lead_shape) + x.shape)


def disentangled_attention(x: Tensor, params: DisentangledParams) -> Tensor:
    """Three-term relative-position attention, scaled by 1/sqrt(3 * head_dim)."""
    content = params.content
    scores = tt.scale(_disentangled_scores(x, params), 1.0 / np.sqrt(3.0 * params.head_dim))
    attn = tt.softmax(scores, axis=-1)
    v = _split_heads(_project(x, content.w_v, content.b_v), content.heads)
    out = _merge_heads(tt.matmul(attn, v))
    return _project(out, content.w_out, content.b_out)


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    rel: Optional[RelPosParams]  # shared table; None for standard attention
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named_params(self, prefix=""):
        out = self.attn.named_params(prefix + "attn.")
        out += [(prefix + n, getattr(self, n))
                for n in ["w_ff1", "b_ff1", "w_ff2", "b_ff2",
                          "ln1_g", "ln1_b", "ln2_g", "ln2_b"]]
        return out


def init_transformer_layer(d, heads, ffn_dim, rng, rel: Optional[RelPosParams] = None,
                           dtype=np.float32) -> TransformerLayerParams:
    attn = init_attention(d, heads, rng, dtype=dtype)
    return TransformerLayerParams(
        attn=attn,
        rel=rel,
        w_ff1=init.trunc_normal(rng, (d, ffn_dim), dtype=dtype),
        b_ff1=init.zeros((ffn_dim,), dtype=dtype),
        w_ff2=init.trunc_normal(rng, (ffn_dim, d), dtype=dtype),
        b_ff2=init.zeros((d,), dtype=dtype),
        ln1_g=init.ones((d,), dtype=dtype),
        ln1_b=init.zeros((d,), dtype=dtype),
        ln2_g=init.ones((d,), dtype=dtype),
        ln2_b=init.zeros((d,), dtype=dtype),
    )


def transformer_layer(x: Tensor, params: TransformerLayerParams, *,
                      train=False, dropout_p=0.0, dropout_rng=None,
                      layerdrop_decision: Optional[bool] = None) -> Tensor:
    """Post-norm residual block: LN(x + Attn(x)), then LN(y + FFN(y)).

    A true ``layerdrop_decision`` skips the whole block during training and
    returns ``x`` bit-unchanged; in eval mode the decision is ignored.
    """
    if train and layerdrop_decision:
        return x
    if params.rel is not None:
        h = disentangled_attention(x, DisentangledParams(params.attn, params.rel))
    else:
        h = multi_head_attention(x, params.attn)
    h = tt.dropout(h, dropout_p, dropout_rng, train)
    y = tt.layer_norm(tt.add(x, h), params.ln1_g, params.ln1_b)
    f = _project(tt.gelu(_project(y, params.w_ff1, params.b_ff1)), params.w_ff2, params.b_ff2)
    f = tt.dropout(f, dropout_p, dropout_rng, train)
    return tt.layer_norm(tt.add(y, f), params.ln2_g, params.ln2_b)
