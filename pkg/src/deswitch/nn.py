"""Transformer building blocks: attention, feed-forward, positional encoding,
convolutional subsampling, layer norm, embeddings, and the label-smoothed loss.

Parameters live in a flat dict mapping dotted names to Tensors. The naming
convention is fixed for checkpoint files: ``<module>.<block-index>.<tensor>``,
e.g. ``p2t.decoder.0.self_attn.wq`` or ``a2p.frontend.conv1.w``.

Residual sub-blocks use pre-norm placement: ``x + dropout(sublayer(norm(x)))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONV_CHANNELS = 8  # channels of both frontend conv layers


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

@dataclass
class AttentionMask:
    """Boolean attention mask: True entries are allowed key positions.

    `allowed` is [L, S] or [batch..., L, S]; None means everything allowed.
    """

    kind: str  # "none" | "causal" | "padding"
    allowed: np.ndarray | None = None

    @staticmethod
    def none() -> "AttentionMask":
        return AttentionMask("none", None)

    @staticmethod
    def causal(n: int) -> "AttentionMask":
        return AttentionMask("causal", np.tril(np.ones((n, n), dtype=bool)))

    @staticmethod
    def padding(key_lengths, q_len: int, s_len: int) -> "AttentionMask":
        """Every query may attend keys [0, len_b) of its batch element."""
        lens = np.asarray(key_lengths, dtype=np.int64)
        key_ok = np.arange(s_len)[None, :] < lens[:, None]  # [B, S]
        allowed = np.broadcast_to(key_ok[:, None, :], (len(lens), q_len, s_len))
        return AttentionMask("padding", np.ascontiguousarray(allowed))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 mask: AttentionMask) -> tuple[Tensor, Tensor]:
    """softmax(QK^T / sqrt(d_k) with masked logits at -inf) V.

    Returns (context, weights). Masked positions carry exactly zero weight;
    a fully masked query row is a contract violation.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query dim {q.shape} does not match key dim {k.shape}")
    scores = ad.matmul(q, k.swap_last()) * (1.0 / np.sqrt(q.shape[-1]))
    if mask.allowed is not None:
        allowed = np.broadcast_to(mask.allowed, scores.shape)
        if not allowed.any(axis=-1).all():
            raise ValueError("attention: some query row has no allowed key")
        scores = ad.masked_fill(scores, ~allowed, -np.inf)
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


def multi_head_attention(params: dict, prefix: str, q: Tensor, k: Tensor,
                         v: Tensor, mask: AttentionMask, heads: int) -> Tensor:
    """Projected multi-head attention, concatenated and output-projected."""
    d_model = q.shape[-1]
    if d_model % heads:
        raise ValueError(f"multi_head_attention: d_model {d_model} not divisible by {heads} heads")
    d_h = d_model // heads

    def split(t: Tensor) -> Tensor:
        # [.., L, d_model] -> [.., h, L, d_h]
        t = t.reshape(t.shape[:-1] + (heads, d_h))
        axes = list(range(t.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return t.transpose(*axes)

    qh = split(ad.matmul(q, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"])
    kh = split(ad.matmul(k, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"])
    vh = split(ad.matmul(v, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"])

    head_mask = mask
    if mask.allowed is not None:
        head_mask = AttentionMask(mask.kind, np.expand_dims(mask.allowed, -3))
    ctx, _ = scaled_dot_product_attention(qh, kh, vh, head_mask)

    axes = list(range(ctx.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    merged = ctx.transpose(*axes).reshape(ctx.shape[:-3] + (q.shape[-2], d_model))
    return ad.matmul(merged, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


# ---------------------------------------------------------------------------
# feed-forward / norm / embeddings
# ---------------------------------------------------------------------------

def position_wise_ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def layer_norm(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def embed(params: dict, name: str, ids) -> Tensor:
    """Embedding lookup scaled by sqrt(d_model)."""
    table = params[name]
    return ad.take(table, np.asarray(ids, dtype=np.int64)) * np.sqrt(table.shape[-1])


def sinusoidal_positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same)."""
    if d_model % 2:
        raise ValueError(f"positional encoding requires even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def add_positional_encoding(x: Tensor) -> Tensor:
    return x + Tensor(sinusoidal_positional_encoding(x.shape[-2], x.shape[-1]))


# ---------------------------------------------------------------------------
# convolutional frontend
# ---------------------------------------------------------------------------

def subsampled_length(t: int) -> int:
    """Output length of the two stride-2 layers: ceil(ceil(t/2)/2)."""
    return ((t + 1) // 2 + 1) // 2


def _zero_beyond(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Zero conv activations [B, C, T, F] at time rows >= per-item length."""
    t = x.shape[2]
    keep = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
    return x * Tensor(keep[:, None, :, None])


def conv_subsample(params: dict, prefix: str, feats: Tensor, lengths=None) -> Tensor:
    """Two 3x3 stride-2 conv+ReLU layers, flattened and projected to d_model.

    feats is [T, d_feat] or [B, T, d_feat]; each spatial axis shrinks to
    ceil(len/2) per layer (zero 'same' padding). With per-utterance
    `lengths`, activations past each true length are zeroed between layers
    so a batched forward matches the unpadded per-utterance forward.
    """
    single = feats.ndim == 2
    if single:
        feats = feats.reshape((1,) + feats.shape)
    B, T, F = feats.shape
    min_t = T if lengths is None else int(np.min(lengths))
    if min_t < 4:
        raise ValueError(f"conv_subsample: need at least 4 frames for two stride-2 layers, got {min_t}")
    lens = None if lengths is None else np.asarray(lengths, dtype=np.int64)
    x = feats.reshape(B, 1, T, F)
    if lens is not None:
        x = _zero_beyond(x, lens)  # pad frames are zeros regardless of caller
    x = ad.relu(ad.conv2d_stride2(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
    if lens is not None:
        lens = (lens + 1) // 2
        x = _zero_beyond(x, lens)
    x = ad.relu(ad.conv2d_stride2(x, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"]))
    if lens is not None:
        lens = (lens + 1) // 2
        x = _zero_beyond(x, lens)
    _, C, To, Fo = x.shape
    x = x.transpose(0, 2, 1, 3).reshape(B, To, C * Fo)
    out = ad.matmul(x, params[f"{prefix}.proj.w"]) + params[f"{prefix}.proj.b"]
    return out.reshape(out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# label-smoothed cross entropy
# ---------------------------------------------------------------------------

def label_smoothing_loss(logits: Tensor, targets, epsilon: float, pad_id: int) -> Tensor:
    """Mean over non-pad positions of cross-entropy against the smoothed
    distribution: 1-eps on the gold unit, eps/(V-1) on every other unit."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label_smoothing_loss: epsilon must be in [0, 1), got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    keep = targets != pad_id
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("label_smoothing_loss: all positions are padding")
    smooth = np.full(targets.shape + (V,), epsilon / (V - 1))
    np.put_along_axis(smooth, targets[..., None], 1.0 - epsilon, axis=-1)
    smooth *= keep[..., None]
    logp = ad.log_softmax(logits, axis=-1)
    return (logp * Tensor(smooth)).sum() * (-1.0 / n_keep)


# ---------------------------------------------------------------------------
# residual blocks
# ---------------------------------------------------------------------------

def residual_sublayer(params: dict, norm_prefix: str, x: Tensor, sublayer,
                      dropout_rate: float, train: bool, rng) -> Tensor:
    """Pre-norm residual: x + dropout(sublayer(norm(x)))."""
    return x + ad.dropout(sublayer(layer_norm(params, norm_prefix, x)),
                          dropout_rate, train, rng)


def encoder_block(params: dict, prefix: str, x: Tensor, mask: AttentionMask,
                  heads: int, dropout_rate: float = 0.0, train: bool = False,
                  rng=None) -> Tensor:
    x = residual_sublayer(
        params, f"{prefix}.norm1", x,
        lambda h: multi_head_attention(params, f"{prefix}.self_attn", h, h, h, mask, heads),
        dropout_rate, train, rng)
    return residual_sublayer(
        params, f"{prefix}.norm2", x,
        lambda h: position_wise_ffn(params, f"{prefix}.ffn", h),
        dropout_rate, train, rng)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _glorot(rng, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


def init_linear(params: dict, prefix: str, rng, d_in: int, d_out: int) -> None:
    params[f"{prefix}.w"] = Tensor(_glorot(rng, d_in, d_out), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(d_out), requires_grad=True)


def init_norm(params: dict, prefix: str, d: int) -> None:
    params[f"{prefix}.gain"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}.bias"] = Tensor(np.zeros(d), requires_grad=True)


def init_mha(params: dict, prefix: str, rng, d_model: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = Tensor(_glorot(rng, d_model, d_model), requires_grad=True)
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{name}"] = Tensor(np.zeros(d_model), requires_grad=True)


def init_ffn(params: dict, prefix: str, rng, d_model: int, d_ff: int) -> None:
    params[f"{prefix}.w1"] = Tensor(_glorot(rng, d_model, d_ff), requires_grad=True)
    params[f"{prefix}.b1"] = Tensor(np.zeros(d_ff), requires_grad=True)
    params[f"{prefix}.w2"] = Tensor(_glorot(rng, d_ff, d_model), requires_grad=True)
    params[f"{prefix}.b2"] = Tensor(np.zeros(d_model), requires_grad=True)


def init_encoder_block(params: dict, prefix: str, rng, d_model: int, d_ff: int) -> None:
    init_norm(params, f"{prefix}.norm1", d_model)
    init_mha(params, f"{prefix}.self_attn", rng, d_model)
    init_norm(params, f"{prefix}.norm2", d_model)
    init_ffn(params, f"{prefix}.ffn", rng, d_model, d_ff)


def init_conv_subsample(params: dict, prefix: str, rng, d_feat: int, d_model: int) -> None:
    c = CONV_CHANNELS
    params[f"{prefix}.conv1.w"] = Tensor(rng.normal(0, 1.0 / 3.0, (c, 1, 3, 3)), requires_grad=True)
    params[f"{prefix}.conv1.b"] = Tensor(np.zeros(c), requires_grad=True)
    params[f"{prefix}.conv2.w"] = Tensor(rng.normal(0, 1.0 / (3.0 * np.sqrt(c)), (c, c, 3, 3)),
                                         requires_grad=True)
    params[f"{prefix}.conv2.b"] = Tensor(np.zeros(c), requires_grad=True)
    f_out = subsampled_length(d_feat)
    init_linear(params, f"{prefix}.proj", rng, c * f_out, d_model)


def init_embedding(params: dict, name: str, rng, vocab: int, d_model: int) -> None:
    params[name] = Tensor(rng.normal(0, 1.0 / np.sqrt(d_model), (vocab, d_model)),
                          requires_grad=True)


def count_parameters(params: dict) -> int:
    return sum(t.size for t in params.values())
