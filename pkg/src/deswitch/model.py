"""Model architectures: baseline encoder-decoder transducer, the acoustic
CTC encoder, the phoneme candidate encoder, and the fusion decoder that
attends over acoustic states and N phoneme candidates in parallel.

All forwards are pure functions of (params, inputs, mode, rng) and accept
either a single sequence or a leading batch dimension. Candidate sets are
processed as one stacked tensor so the per-block cost grows with tensor
size, not with graph size, as the candidate count N increases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import ModelConfig

ABLATION_VARIANTS = ("-PEL", "-AEL")  # drop phoneme / acoustic encoder branch


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def init_baseline_params(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    _require_vocabs(cfg)
    p: dict[str, Tensor] = {}
    nn.init_conv_subsample(p, "baseline.frontend", rng, cfg.d_feat, cfg.d_model)
    for i in range(cfg.n_enc_baseline):
        nn.init_encoder_block(p, f"baseline.encoder.{i}", rng, cfg.d_model, cfg.ffn_dim)
    nn.init_norm(p, "baseline.encoder.final_norm", cfg.d_model)
    nn.init_embedding(p, "baseline.tgt_embed.table", rng, cfg.target_vocab, cfg.d_model)
    for i in range(cfg.n_dec):
        pre = f"baseline.decoder.{i}"
        nn.init_norm(p, f"{pre}.norm1", cfg.d_model)
        nn.init_mha(p, f"{pre}.self_attn", rng, cfg.d_model)
        nn.init_norm(p, f"{pre}.norm2", cfg.d_model)
        nn.init_mha(p, f"{pre}.cross_attn", rng, cfg.d_model)
        nn.init_norm(p, f"{pre}.norm3", cfg.d_model)
        nn.init_ffn(p, f"{pre}.ffn", rng, cfg.d_model, cfg.ffn_dim)
    nn.init_norm(p, "baseline.decoder.final_norm", cfg.d_model)
    nn.init_linear(p, "baseline.out", rng, cfg.d_model, cfg.target_vocab)
    return p


def init_a2p_params(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    if cfg.phoneme_vocab < 1:
        raise ValueError("phoneme_vocab must be set before building the acoustic network")
    p: dict[str, Tensor] = {}
    nn.init_conv_subsample(p, "a2p.frontend", rng, cfg.d_feat, cfg.d_model)
    for i in range(cfg.n_acoustic_enc):
        nn.init_encoder_block(p, f"a2p.encoder.{i}", rng, cfg.d_model, cfg.ffn_dim)
    nn.init_norm(p, "a2p.encoder.final_norm", cfg.d_model)
    nn.init_linear(p, "a2p.ctc_proj", rng, cfg.d_model, cfg.phoneme_vocab + 1)
    return p


def init_p2t_params(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    _require_vocabs(cfg)
    p: dict[str, Tensor] = {}
    nn.init_embedding(p, "p2t.phoneme_embed.table", rng, cfg.phoneme_vocab + 1, cfg.d_model)
    for i in range(cfg.n_phoneme_enc):
        nn.init_encoder_block(p, f"p2t.phoneme_encoder.{i}", rng, cfg.d_model, cfg.ffn_dim)
    nn.init_norm(p, "p2t.phoneme_encoder.final_norm", cfg.d_model)
    nn.init_embedding(p, "p2t.tgt_embed.table", rng, cfg.target_vocab, cfg.d_model)
    for i in range(cfg.n_dec):
        pre = f"p2t.decoder.{i}"
        nn.init_norm(p, f"{pre}.norm1", cfg.d_model)
        nn.init_mha(p, f"{pre}.self_attn", rng, cfg.d_model)
        nn.init_norm(p, f"{pre}.norm2", cfg.d_model)
        nn.init_mha(p, f"{pre}.acoustic_attn", rng, cfg.d_model)
        nn.init_mha(p, f"{pre}.phoneme_attn", rng, cfg.d_model)
        nn.init_linear(p, f"{pre}.fusion", rng, 2 * cfg.d_model, cfg.d_model)
        nn.init_norm(p, f"{pre}.norm3", cfg.d_model)
        nn.init_ffn(p, f"{pre}.ffn", rng, cfg.d_model, cfg.ffn_dim)
    nn.init_norm(p, "p2t.decoder.final_norm", cfg.d_model)
    nn.init_linear(p, "p2t.out", rng, cfg.d_model, cfg.target_vocab)
    return p


def _require_vocabs(cfg: ModelConfig) -> None:
    if cfg.target_vocab < 4 or cfg.phoneme_vocab < 1:
        raise ValueError("target_vocab and phoneme_vocab must be set from the corpus")


def parameter_parity(cfg: ModelConfig) -> tuple[int, int, float]:
    """(baseline count, decoupled count, max/min ratio) at this config."""
    rng = np.random.default_rng(0)
    n_base = nn.count_parameters(init_baseline_params(cfg, rng))
    n_dec = nn.count_parameters(init_a2p_params(cfg, rng)) + \
        nn.count_parameters(init_p2t_params(cfg, rng))
    ratio = max(n_base, n_dec) / min(n_base, n_dec)
    return n_base, n_dec, ratio


def assert_parameter_parity(cfg: ModelConfig, tolerance: float = 0.15) -> None:
    """Comparisons between the two models require similar budgets."""
    n_base, n_dec, ratio = parameter_parity(cfg)
    if ratio > 1.0 + tolerance:
        raise ValueError(
            f"parameter budgets diverge: baseline {n_base} vs decoupled {n_dec} "
            f"(ratio {ratio:.3f} > {1 + tolerance:.2f}); adjust block counts")


# ---------------------------------------------------------------------------
# acoustic network
# ---------------------------------------------------------------------------

def a2p_forward(params: dict, feats: Tensor, cfg: ModelConfig,
                lengths=None, train: bool = False, rng=None
                ) -> tuple[Tensor, Tensor, np.ndarray | None]:
    """Frontend + acoustic encoder; returns (log_probs, hidden, out_lengths).

    log_probs rows are log-distributions over phonemes+blank; `hidden` is
    the pre-projection state used as keys/values by the fusion decoder.
    For batched input, `lengths` gives true frame counts and `out_lengths`
    the per-utterance subsampled lengths.
    """
    if feats.ndim == 3 and lengths is None:
        lengths = np.full(feats.shape[0], feats.shape[-2], dtype=np.int64)
    h = nn.conv_subsample(params, "a2p.frontend", feats, lengths=lengths)
    h = nn.add_positional_encoding(h)
    out_lengths = None
    mask = nn.AttentionMask.none()
    if h.ndim == 3:
        out_lengths = np.array([nn.subsampled_length(int(t)) for t in lengths])
        mask = nn.AttentionMask.padding(out_lengths, h.shape[-2], h.shape[-2])
    for i in range(cfg.n_acoustic_enc):
        h = nn.encoder_block(params, f"a2p.encoder.{i}", h, mask, cfg.heads,
                             cfg.dropout, train, rng)
    h = nn.layer_norm(params, "a2p.encoder.final_norm", h)
    logits = ad.matmul(h, params["a2p.ctc_proj.w"]) + params["a2p.ctc_proj.b"]
    return ad.log_softmax(logits, axis=-1), h, out_lengths


# ---------------------------------------------------------------------------
# phoneme encoder
# ---------------------------------------------------------------------------

def phoneme_encode(params: dict, candidate, cfg: ModelConfig,
                   lengths=None, train: bool = False, rng=None) -> Tensor:
    """Embed and encode phoneme ids [S], [N, S], or [B, N, S]."""
    ids = np.asarray(candidate, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("phoneme_encode: candidate must be nonempty")
    if ids.min() < 1 or ids.max() > cfg.phoneme_vocab:
        raise ValueError(f"phoneme_encode: unknown phoneme id "
                         f"(valid range 1..{cfg.phoneme_vocab})")
    h = nn.embed(params, "p2t.phoneme_embed.table", ids)
    h = nn.add_positional_encoding(h)
    mask = nn.AttentionMask.none()
    if lengths is not None:
        lens = np.maximum(np.asarray(lengths).reshape(-1), 1)
        s = ids.shape[-1]
        key_ok = np.arange(s)[None, :] < lens[:, None]
        allowed = np.broadcast_to(key_ok[:, None, :], (lens.size, s, s))
        mask = nn.AttentionMask("padding", allowed.reshape(ids.shape[:-1] + (s, s)))
    for i in range(cfg.n_phoneme_enc):
        h = nn.encoder_block(params, f"p2t.phoneme_encoder.{i}", h, mask, cfg.heads,
                             cfg.dropout, train, rng)
    return nn.layer_norm(params, "p2t.phoneme_encoder.final_norm", h)


# ---------------------------------------------------------------------------
# multi-level attention
# ---------------------------------------------------------------------------

def phoneme_level_attention(params: dict, prefix: str, q: Tensor,
                            encoded_candidates: list[Tensor], heads: int
                            ) -> list[Tensor]:
    """Cross-attention from target queries to each encoded candidate.

    Candidates may have different lengths; each context has the query's
    shape. The stacked path used here is numerically identical to looping
    plain multi-head attention over candidates.
    """
    if not encoded_candidates:
        raise ValueError("phoneme_level_attention: empty candidate list")
    stacked, lengths = stack_candidates(encoded_candidates)
    ctx = _candidate_attention(params, prefix, q, stacked, lengths, heads)
    return [ctx[n] for n in range(len(encoded_candidates))]


def stack_candidates(encoded: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Zero-pad [S_n, d] encodings to a [N, S_max, d] tensor plus lengths."""
    lengths = np.array([e.shape[0] for e in encoded], dtype=np.int64)
    s_max = int(lengths.max())
    padded = [ad.pad(e, ((0, s_max - e.shape[0]), (0, 0))) if e.shape[0] < s_max else e
              for e in encoded]
    return ad.stack(padded, axis=0), lengths


def _candidate_attention(params: dict, prefix: str, q: Tensor, stacked: Tensor,
                         lengths: np.ndarray, heads: int) -> Tensor:
    """MHA from q [.., L, d] to stacked candidates [.., N, S, d] -> [.., N, L, d]."""
    n, s = stacked.shape[-3], stacked.shape[-2]
    L = q.shape[-2]
    # missing candidate slots (length 0) keep one key attendable; their
    # context is zeroed exactly by the sentence-level count mask
    key_ok = np.arange(s)[None, :] < np.maximum(lengths, 1).reshape(-1, 1)
    allowed = np.broadcast_to(key_ok[:, None, :], (key_ok.shape[0], L, s))
    allowed = allowed.reshape(stacked.shape[:-2] + (L, s))
    q_b = q.reshape(q.shape[:-2] + (1, L, q.shape[-1]))
    return nn.multi_head_attention(params, prefix, q_b, stacked, stacked,
                                   nn.AttentionMask("padding", allowed), heads)


def sentence_level_attention(q: Tensor, contexts, count_mask=None) -> Tensor:
    """Fuse N context sequences by a per-position softmax over candidates.

    For each position t the weights are softmax_n(q_t . c_{t,n} / sqrt(d));
    the output is the weighted average of the contexts at t. `contexts` is
    a list of [.., L, d] tensors or a stacked [.., N, L, d] tensor;
    `count_mask` (bool [.., N]) marks real candidates when N varies.
    """
    if isinstance(contexts, (list, tuple)):
        if not contexts:
            raise ValueError("sentence_level_attention: empty context list")
        stacked = ad.stack(list(contexts), axis=0)
    else:
        stacked = contexts
    d = q.shape[-1]
    q_b = q.reshape(q.shape[:-2] + (1,) + q.shape[-2:])
    scores = (stacked * q_b).sum(axis=-1) * (1.0 / np.sqrt(d))  # [.., N, L]
    if count_mask is not None:
        blocked = ~np.asarray(count_mask, dtype=bool)[..., None]
        if blocked.all(axis=-2).any():
            raise ValueError("sentence_level_attention: no real candidates")
        scores = ad.masked_fill(scores, np.broadcast_to(blocked, scores.shape), -np.inf)
    weights = ad.softmax(scores, axis=-2)  # over candidates
    fused = (weights.reshape(weights.shape + (1,)) * stacked).sum(axis=-3)
    return fused


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

@dataclass
class CandidateSet:
    """Encoded phoneme candidates for one utterance or a batch.

    encoded: [N, S, d] or [B, N, S, d]; lengths: matching [N] / [B, N]
    true lengths with 0 marking padded-out candidate slots.
    """

    encoded: Tensor
    lengths: np.ndarray

    @property
    def count_mask(self) -> np.ndarray:
        return self.lengths > 0


def fusion_decoder_forward(params: dict, cfg: ModelConfig, targets_in,
                           acoustic_hidden: Tensor | None, candidates: CandidateSet,
                           acoustic_lengths=None, train: bool = False, rng=None,
                           variant: str | None = None) -> Tensor:
    """Decoder with masked self-attention and parallel dual cross-attention.

    Per block the acoustic context and the multi-level phoneme context are
    concatenated and projected back to model width. `variant` replaces one
    context half with zeros: "-PEL" drops the phoneme branch, "-AEL" the
    acoustic branch. A missing `acoustic_hidden` (text-only pretraining)
    also zeroes the acoustic half.
    """
    if variant not in (None, *ABLATION_VARIANTS):
        raise ValueError(f"unknown ablation variant: {variant!r}")
    if candidates is None or candidates.encoded.shape[-3] == 0:
        raise ValueError("fusion decoder requires at least one phoneme candidate")
    ids = np.asarray(targets_in, dtype=np.int64)
    L = ids.shape[-1]
    x = nn.embed(params, "p2t.tgt_embed.table", ids)
    x = nn.add_positional_encoding(x)
    causal = nn.AttentionMask.causal(L)

    ac_mask = nn.AttentionMask.none()
    if acoustic_hidden is not None and acoustic_hidden.ndim == 3 and acoustic_lengths is not None:
        ac_mask = nn.AttentionMask.padding(acoustic_lengths, L, acoustic_hidden.shape[-2])

    batched = ids.ndim == 2
    cand_lengths = candidates.lengths
    count_mask = candidates.count_mask

    for i in range(cfg.n_dec):
        pre = f"p2t.decoder.{i}"
        x = nn.residual_sublayer(
            params, f"{pre}.norm1", x,
            lambda h: nn.multi_head_attention(params, f"{pre}.self_attn", h, h, h,
                                              causal, cfg.heads),
            cfg.dropout, train, rng)
        z = nn.layer_norm(params, f"{pre}.norm2", x)
        zero_ctx = Tensor(np.zeros(z.shape))
        if acoustic_hidden is None or variant == "-AEL":
            ca = zero_ctx
        else:
            ca = nn.multi_head_attention(params, f"{pre}.acoustic_attn", z,
                                         acoustic_hidden, acoustic_hidden,
                                         ac_mask, cfg.heads)
        if variant == "-PEL":
            cp = zero_ctx
        else:
            ctx = _candidate_attention(params, f"{pre}.phoneme_attn", z,
                                       candidates.encoded, cand_lengths, cfg.heads)
            cp = sentence_level_attention(z, ctx, count_mask if batched else None)
        fused = ad.matmul(ad.concat([ca, cp], axis=-1), params[f"{pre}.fusion.w"]) \
            + params[f"{pre}.fusion.b"]
        x = x + ad.dropout(fused, cfg.dropout, train, rng)
        x = nn.residual_sublayer(
            params, f"{pre}.norm3", x,
            lambda h: nn.position_wise_ffn(params, f"{pre}.ffn", h),
            cfg.dropout, train, rng)

    x = nn.layer_norm(params, "p2t.decoder.final_norm", x)
    return ad.matmul(x, params["p2t.out.w"]) + params["p2t.out.b"]


def baseline_forward(params: dict, cfg: ModelConfig, feats: Tensor, targets_in,
                     lengths=None, train: bool = False, rng=None) -> Tensor:
    """Standard encoder-decoder forward with causal decoder masking."""
    if feats.ndim == 3 and lengths is None:
        lengths = np.full(feats.shape[0], feats.shape[-2], dtype=np.int64)
    h = nn.conv_subsample(params, "baseline.frontend", feats, lengths=lengths)
    h = nn.add_positional_encoding(h)
    enc_mask = nn.AttentionMask.none()
    out_lengths = None
    if h.ndim == 3:
        out_lengths = np.array([nn.subsampled_length(int(t)) for t in lengths])
        enc_mask = nn.AttentionMask.padding(out_lengths, h.shape[-2], h.shape[-2])
    for i in range(cfg.n_enc_baseline):
        h = nn.encoder_block(params, f"baseline.encoder.{i}", h, enc_mask, cfg.heads,
                             cfg.dropout, train, rng)
    h = nn.layer_norm(params, "baseline.encoder.final_norm", h)

    ids = np.asarray(targets_in, dtype=np.int64)
    L = ids.shape[-1]
    x = nn.embed(params, "baseline.tgt_embed.table", ids)
    x = nn.add_positional_encoding(x)
    causal = nn.AttentionMask.causal(L)
    cross_mask = nn.AttentionMask.none()
    if out_lengths is not None:
        cross_mask = nn.AttentionMask.padding(out_lengths, L, h.shape[-2])
    for i in range(cfg.n_dec):
        pre = f"baseline.decoder.{i}"
        x = nn.residual_sublayer(
            params, f"{pre}.norm1", x,
            lambda t: nn.multi_head_attention(params, f"{pre}.self_attn", t, t, t,
                                              causal, cfg.heads),
            cfg.dropout, train, rng)
        x = nn.residual_sublayer(
            params, f"{pre}.norm2", x,
            lambda t: nn.multi_head_attention(params, f"{pre}.cross_attn", t, h, h,
                                              cross_mask, cfg.heads),
            cfg.dropout, train, rng)
        x = nn.residual_sublayer(
            params, f"{pre}.norm3", x,
            lambda t: nn.position_wise_ffn(params, f"{pre}.ffn", t),
            cfg.dropout, train, rng)
    x = nn.layer_norm(params, "baseline.decoder.final_norm", x)
    return ad.matmul(x, params["baseline.out.w"]) + params["baseline.out.b"]


def encode_candidate_set(params: dict, cfg: ModelConfig,
                         candidate_ids: list, train: bool = False, rng=None
                         ) -> CandidateSet:
    """Encode a list of phoneme id sequences into a padded CandidateSet."""
    if not candidate_ids:
        raise ValueError("encode_candidate_set: empty candidate list")
    lengths = np.array([len(c) for c in candidate_ids], dtype=np.int64)
    if lengths.min() == 0:
        raise ValueError("encode_candidate_set: empty candidate sequence")
    s_max = int(lengths.max())
    ids = np.ones((len(candidate_ids), s_max), dtype=np.int64)  # pad with id 1, masked away
    for n, c in enumerate(candidate_ids):
        ids[n, :len(c)] = c
    encoded = phoneme_encode(params, ids, cfg, lengths=lengths, train=train, rng=rng)
    return CandidateSet(encoded=encoded, lengths=lengths)
