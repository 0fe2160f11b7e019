"""Architecture tests: multi-level attention identities, causality,
ablation views, parameter parity, and checkpoint round-trips."""

import numpy as np
import pytest

from deswitch import autodiff as ad
from deswitch import checkpoint as ckpt
from deswitch import model, nn
from deswitch.autodiff import Tensor
from deswitch.config import ModelConfig

from oracles import conv_out_length


TINY = ModelConfig(d_model=16, heads=2, ffn_dim=32, n_enc_baseline=3, n_dec=1,
                   n_acoustic_enc=1, n_phoneme_enc=1, target_vocab=20, phoneme_vocab=8)


@pytest.fixture(scope="module")
def tiny_models():
    rng = np.random.default_rng(42)
    return (model.init_a2p_params(TINY, rng), model.init_p2t_params(TINY, rng),
            model.init_baseline_params(TINY, rng))


def make_candidates(p2t, rng, n, max_len=5):
    seqs = [rng.integers(1, TINY.phoneme_vocab + 1,
                         size=int(rng.integers(2, max_len + 1))).tolist()
            for _ in range(n)]
    return model.encode_candidate_set(p2t, TINY, seqs), seqs


def frozen(params):
    """Detached copy so grad checks touch only the tensor under test."""
    return {k: ad.Tensor(v.data) for k, v in params.items()}


# ---------------------------------------------------------------------------
# config / parity
# ---------------------------------------------------------------------------

def test_default_config_parameter_parity():
    cfg = ModelConfig(target_vocab=93, phoneme_vocab=41)
    n_base, n_dec, ratio = model.parameter_parity(cfg)
    assert ratio <= 1.15, (n_base, n_dec)
    model.assert_parameter_parity(cfg)


def test_parity_assert_rejects_lopsided_config():
    cfg = ModelConfig(n_enc_baseline=1, n_acoustic_enc=8, n_phoneme_enc=4,
                      target_vocab=93, phoneme_vocab=41)
    with pytest.raises(ValueError, match="diverge"):
        model.assert_parameter_parity(cfg)


def test_config_invariants():
    with pytest.raises(ValueError, match="n_candidates"):
        ModelConfig(ctc_beam=4, n_candidates=8)
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=60, heads=8)


def test_paper_preset_fields():
    cfg = ModelConfig.paper_preset(target_vocab=5277, phoneme_vocab=293)
    assert (cfg.d_model, cfg.heads, cfg.ffn_dim) == (512, 8, 2048)
    assert (cfg.n_enc_baseline, cfg.n_dec) == (12, 6)
    assert (cfg.n_acoustic_enc, cfg.n_phoneme_enc) == (8, 4)
    assert cfg.ctc_beam == 20


# ---------------------------------------------------------------------------
# acoustic network
# ---------------------------------------------------------------------------

def test_a2p_rows_are_log_distributions(tiny_models):
    a2p, _, _ = tiny_models
    rng = np.random.default_rng(0)
    logp, _, _ = model.a2p_forward(a2p, Tensor(rng.standard_normal((14, TINY.d_feat))), TINY)
    sums = np.log(np.exp(logp.data).sum(axis=-1))
    assert np.abs(sums).max() < 1e-9


@pytest.mark.parametrize("t", [4, 7, 16, 33])
def test_a2p_output_length_matches_oracle(tiny_models, t):
    a2p, _, _ = tiny_models
    rng = np.random.default_rng(1)
    logp, hidden, _ = model.a2p_forward(a2p, Tensor(rng.standard_normal((t, TINY.d_feat))), TINY)
    assert logp.shape[0] == hidden.shape[0] == conv_out_length(t)


def test_a2p_batched_lengths(tiny_models):
    a2p, _, _ = tiny_models
    rng = np.random.default_rng(2)
    feats = Tensor(rng.standard_normal((3, 17, TINY.d_feat)))
    logp, _, out_lens = model.a2p_forward(a2p, feats, TINY, lengths=[17, 9, 5])
    np.testing.assert_array_equal(out_lens, [conv_out_length(t) for t in (17, 9, 5)])
    assert logp.shape[:2] == (3, conv_out_length(17))


# ---------------------------------------------------------------------------
# phoneme encoder
# ---------------------------------------------------------------------------

def test_phoneme_encode_shape_and_determinism(tiny_models):
    _, p2t, _ = tiny_models
    out1 = model.phoneme_encode(p2t, [1, 2, 3, 4], TINY)
    out2 = model.phoneme_encode(p2t, [1, 2, 3, 4], TINY)
    assert out1.shape == (4, TINY.d_model)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_phoneme_encode_rejects_unknown_ids(tiny_models):
    _, p2t, _ = tiny_models
    with pytest.raises(ValueError, match="unknown phoneme id"):
        model.phoneme_encode(p2t, [1, 99], TINY)
    with pytest.raises(ValueError, match="nonempty"):
        model.phoneme_encode(p2t, [], TINY)


def test_phoneme_encode_grad_check(tiny_models):
    _, p2t, _ = tiny_models
    base = frozen(p2t)
    probe = Tensor(np.random.default_rng(3).standard_normal((3, TINY.d_model)))
    name = "p2t.phoneme_encoder.0.self_attn.wq"

    def f(t):
        params = dict(base)
        params[name] = t
        return (model.phoneme_encode(params, [1, 2, 3], TINY) * probe).sum()

    assert ad.grad_check(f, Tensor(p2t[name].data.copy())).passed


# ---------------------------------------------------------------------------
# multi-level attention
# ---------------------------------------------------------------------------

def test_phoneme_level_attention_n1_equals_plain_mha(tiny_models):
    _, p2t, _ = tiny_models
    rng = np.random.default_rng(4)
    q = Tensor(rng.standard_normal((5, TINY.d_model)))
    enc = model.phoneme_encode(p2t, [1, 2, 3], TINY)
    prefix = "p2t.decoder.0.phoneme_attn"
    ctxs = model.phoneme_level_attention(p2t, prefix, q, [enc], TINY.heads)
    plain = nn.multi_head_attention(p2t, prefix, q, enc, enc,
                                    nn.AttentionMask.none(), TINY.heads)
    assert len(ctxs) == 1
    np.testing.assert_allclose(ctxs[0].data, plain.data, atol=1e-12)


def test_phoneme_level_attention_shapes_with_ragged_lengths(tiny_models):
    _, p2t, _ = tiny_models
    rng = np.random.default_rng(5)
    q = Tensor(rng.standard_normal((6, TINY.d_model)))
    encs = [model.phoneme_encode(p2t, list(range(1, 2 + k)), TINY) for k in (1, 3, 5)]
    ctxs = model.phoneme_level_attention(p2t, "p2t.decoder.0.phoneme_attn", q, encs, TINY.heads)
    assert [c.shape for c in ctxs] == [(6, TINY.d_model)] * 3


def test_phoneme_level_attention_matches_per_candidate_loop(tiny_models):
    _, p2t, _ = tiny_models
    rng = np.random.default_rng(6)
    q = Tensor(rng.standard_normal((4, TINY.d_model)))
    encs = [model.phoneme_encode(p2t, rng.integers(1, 9, size=k).tolist(), TINY)
            for k in (2, 4, 3)]
    prefix = "p2t.decoder.0.phoneme_attn"
    ctxs = model.phoneme_level_attention(p2t, prefix, q, encs, TINY.heads)
    for c, e in zip(ctxs, encs):
        ref = nn.multi_head_attention(p2t, prefix, q, e, e,
                                      nn.AttentionMask.none(), TINY.heads)
        np.testing.assert_allclose(c.data, ref.data, atol=1e-10)


def test_phoneme_level_attention_empty_list_error(tiny_models):
    _, p2t, _ = tiny_models
    with pytest.raises(ValueError, match="empty candidate"):
        model.phoneme_level_attention(p2t, "p2t.decoder.0.phoneme_attn",
                                      Tensor(np.zeros((2, TINY.d_model))), [], TINY.heads)


def test_sentence_level_attention_n1_identity():
    rng = np.random.default_rng(7)
    q = Tensor(rng.standard_normal((5, 8)))
    c = Tensor(rng.standard_normal((5, 8)))
    out = model.sentence_level_attention(q, [c])
    np.testing.assert_allclose(out.data, c.data, atol=1e-15)


def test_sentence_level_attention_identical_contexts_uniform():
    rng = np.random.default_rng(8)
    q = Tensor(rng.standard_normal((4, 8)))
    c = Tensor(rng.standard_normal((4, 8)))
    out = model.sentence_level_attention(q, [c, c, c])
    np.testing.assert_allclose(out.data, c.data, atol=1e-12)


def sentence_loop_reference(q, contexts):
    """Independent per-position reference of the learned weighted average."""
    L, d = q.shape
    N = len(contexts)
    out = np.zeros((L, d))
    for t in range(L):
        scores = np.array([q[t] @ contexts[n][t] / np.sqrt(d) for n in range(N)])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        for n in range(N):
            out[t] += w[n] * contexts[n][t]
    return out


def test_sentence_level_attention_matches_loop_reference():
    rng = np.random.default_rng(9)
    q = rng.standard_normal((6, 8))
    contexts = [rng.standard_normal((6, 8)) for _ in range(3)]
    out = model.sentence_level_attention(Tensor(q), [Tensor(c) for c in contexts])
    np.testing.assert_allclose(out.data, sentence_loop_reference(q, contexts), atol=1e-12)


def test_sentence_level_weights_sum_to_one():
    rng = np.random.default_rng(10)
    q = Tensor(rng.standard_normal((5, 8)))
    contexts = ad.stack([Tensor(rng.standard_normal((5, 8))) for _ in range(4)], axis=0)
    scores = (contexts * q.reshape(1, 5, 8)).sum(axis=-1) * (1 / np.sqrt(8))
    w = ad.softmax(scores, axis=-2).data
    np.testing.assert_allclose(w.sum(axis=0), np.ones(5), atol=1e-12)
    assert np.all(w >= 0)


# ---------------------------------------------------------------------------
# fusion decoder
# ---------------------------------------------------------------------------

def decoder_setup(tiny_models, seed=11, n_cands=3, L=6):
    a2p, p2t, _ = tiny_models
    rng = np.random.default_rng(seed)
    feats = Tensor(rng.standard_normal((14, TINY.d_feat)))
    _, hidden, _ = model.a2p_forward(a2p, feats, TINY)
    cands, seqs = make_candidates(p2t, rng, n_cands)
    tgt_in = rng.integers(1, TINY.target_vocab, size=L)
    return p2t, hidden, cands, seqs, tgt_in, rng


def test_fusion_decoder_causality_bitwise(tiny_models):
    p2t, hidden, cands, _, tgt_in, rng = decoder_setup(tiny_models)
    base = model.fusion_decoder_forward(p2t, TINY, tgt_in, hidden, cands).data
    for t in (1, 3, 4):
        perturbed = tgt_in.copy()
        perturbed[t + 1:] = rng.integers(1, TINY.target_vocab, size=len(tgt_in) - t - 1)
        out = model.fusion_decoder_forward(p2t, TINY, perturbed, hidden, cands).data
        np.testing.assert_array_equal(out[:t + 1], base[:t + 1])


def test_fusion_pel_ablation_ignores_candidates(tiny_models):
    p2t, hidden, cands, _, tgt_in, rng = decoder_setup(tiny_models)
    other, _ = make_candidates(p2t, rng, 4)
    a = model.fusion_decoder_forward(p2t, TINY, tgt_in, hidden, cands, variant="-PEL").data
    b = model.fusion_decoder_forward(p2t, TINY, tgt_in, hidden, other, variant="-PEL").data
    np.testing.assert_array_equal(a, b)
    full = model.fusion_decoder_forward(p2t, TINY, tgt_in, hidden, cands).data
    assert not np.array_equal(a, full)


def test_fusion_ael_ablation_ignores_acoustics(tiny_models):
    p2t, hidden, cands, _, tgt_in, rng = decoder_setup(tiny_models)
    other_hidden = Tensor(rng.standard_normal(hidden.shape))
    a = model.fusion_decoder_forward(p2t, TINY, tgt_in, hidden, cands, variant="-AEL").data
    b = model.fusion_decoder_forward(p2t, TINY, tgt_in, other_hidden, cands, variant="-AEL").data
    np.testing.assert_array_equal(a, b)
    # text-only pretraining path (no acoustics) is the same computation
    c = model.fusion_decoder_forward(p2t, TINY, tgt_in, None, cands).data
    np.testing.assert_array_equal(a, c)


def test_fusion_unknown_variant_and_empty_candidates(tiny_models):
    p2t, hidden, cands, _, tgt_in, _ = decoder_setup(tiny_models)
    with pytest.raises(ValueError, match="variant"):
        model.fusion_decoder_forward(p2t, TINY, tgt_in, hidden, cands, variant="-XXX")
    with pytest.raises(ValueError, match="candidate"):
        model.encode_candidate_set(p2t, TINY, [])


def test_fusion_decoder_grad_check(tiny_models):
    p2t, hidden, cands, _, tgt_in, _ = decoder_setup(tiny_models, L=4)
    base = frozen(p2t)
    hidden = hidden.detach()
    cands = model.CandidateSet(encoded=cands.encoded.detach(), lengths=cands.lengths)
    probe = Tensor(np.random.default_rng(0).standard_normal((4, TINY.target_vocab)) * 0.1)
    name = "p2t.decoder.0.fusion.w"

    def f(t):
        params = dict(base)
        params[name] = t
        out = model.fusion_decoder_forward(params, TINY, tgt_in, hidden, cands)
        return (out * probe).sum()

    assert ad.grad_check(f, Tensor(p2t[name].data.copy())).passed


def naive_fusion_forward(params, cfg, targets_in, acoustic_hidden, cand_encodings):
    """Reference decoder that loops attention per candidate and fuses with
    the documented per-position sentence formula."""
    ids = np.asarray(targets_in)
    L = ids.shape[-1]
    x = nn.embed(params, "p2t.tgt_embed.table", ids)
    x = nn.add_positional_encoding(x)
    causal = nn.AttentionMask.causal(L)
    for i in range(cfg.n_dec):
        pre = f"p2t.decoder.{i}"
        x = x + nn.multi_head_attention(params, f"{pre}.self_attn",
                                        *(nn.layer_norm(params, f"{pre}.norm1", x),) * 3,
                                        causal, cfg.heads)
        z = nn.layer_norm(params, f"{pre}.norm2", x)
        ca = nn.multi_head_attention(params, f"{pre}.acoustic_attn", z, acoustic_hidden,
                                     acoustic_hidden, nn.AttentionMask.none(), cfg.heads)
        per_cand = [nn.multi_head_attention(params, f"{pre}.phoneme_attn", z, e, e,
                                            nn.AttentionMask.none(), cfg.heads).data
                    for e in cand_encodings]
        cp = sentence_loop_reference(z.data, per_cand)
        fused = ad.matmul(ad.concat([ca, Tensor(cp)], axis=-1), params[f"{pre}.fusion.w"]) \
            + params[f"{pre}.fusion.b"]
        x = x + fused
        x = x + nn.position_wise_ffn(params, f"{pre}.ffn",
                                     nn.layer_norm(params, f"{pre}.norm3", x))
    x = nn.layer_norm(params, "p2t.decoder.final_norm", x)
    return (ad.matmul(x, params["p2t.out.w"]) + params["p2t.out.b"]).data


@pytest.mark.parametrize("n_cands", [2, 4, 8])
def test_full_forward_matches_naive_per_candidate_reference(tiny_models, n_cands):
    p2t, hidden, cands, seqs, tgt_in, _ = decoder_setup(tiny_models, seed=20 + n_cands,
                                                        n_cands=n_cands)
    fast = model.fusion_decoder_forward(p2t, TINY, tgt_in, hidden, cands).data
    encs = [model.phoneme_encode(p2t, s, TINY) for s in seqs]
    ref = naive_fusion_forward(p2t, TINY, tgt_in, hidden, encs)
    np.testing.assert_allclose(fast, ref, atol=1e-10)


def test_batched_fusion_equals_per_utterance(tiny_models):
    a2p, p2t, _ = tiny_models
    rng = np.random.default_rng(30)
    B, L = 3, 5
    feats = rng.standard_normal((B, 16, TINY.d_feat))
    f_lens = np.array([16, 12, 10])
    _, hiddenB, out_lens = model.a2p_forward(a2p, Tensor(feats), TINY, lengths=f_lens)
    seqs = [[[1, 2, 3], [2, 3]], [[4, 5]], [[6], [6, 7], [7, 1]]]
    n_max = max(len(s) for s in seqs)
    s_max = max(len(c) for s in seqs for c in s)
    ids = np.ones((B, n_max, s_max), dtype=np.int64)
    lens = np.zeros((B, n_max), dtype=np.int64)
    for b, s in enumerate(seqs):
        for n, c in enumerate(s):
            ids[b, n, :len(c)] = c
            lens[b, n] = len(c)
    encB = model.phoneme_encode(p2t, ids, TINY, lengths=lens)
    candsB = model.CandidateSet(encoded=encB, lengths=lens)
    tgt = rng.integers(1, TINY.target_vocab, size=(B, L))
    outB = model.fusion_decoder_forward(p2t, TINY, tgt, hiddenB, candsB,
                                        acoustic_lengths=out_lens).data
    for b in range(B):
        _, hidden1, _ = model.a2p_forward(a2p, Tensor(feats[b, :f_lens[b]]), TINY)
        cands1 = model.encode_candidate_set(p2t, TINY, seqs[b])
        out1 = model.fusion_decoder_forward(p2t, TINY, tgt[b], hidden1, cands1).data
        np.testing.assert_allclose(outB[b], out1, atol=1e-10)


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def test_baseline_causality_bitwise(tiny_models):
    _, _, base = tiny_models
    rng = np.random.default_rng(31)
    feats = Tensor(rng.standard_normal((12, TINY.d_feat)))
    tgt = rng.integers(1, TINY.target_vocab, size=6)
    ref = model.baseline_forward(base, TINY, feats, tgt).data
    perturbed = tgt.copy()
    perturbed[4:] = (perturbed[4:] + 7) % TINY.target_vocab
    out = model.baseline_forward(base, TINY, feats, perturbed).data
    np.testing.assert_array_equal(out[:4], ref[:4])


def test_baseline_overfit_loss_decreases(tiny_models):
    # quick sanity: 30 plain-SGD steps on one pair reduce the loss
    rng = np.random.default_rng(32)
    params = model.init_baseline_params(TINY, rng)
    feats = Tensor(rng.standard_normal((10, TINY.d_feat)))
    tgt_in = np.array([1, 4, 5, 6])
    tgt_out = np.array([4, 5, 6, 2])
    losses = []
    for _ in range(30):
        logits = model.baseline_forward(params, TINY, feats, tgt_in)
        loss = nn.label_smoothing_loss(logits, tgt_out, 0.0, pad_id=0)
        losses.append(loss.item())
        ad.backward(loss)
        for t in params.values():
            if t.grad is not None:
                t.data = t.data - 0.05 * t.grad
        ad.zero_grad(params)
    assert losses[-1] < losses[0] * 0.7


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tiny_models, tmp_path):
    a2p, _, _ = tiny_models
    path = ckpt.save_checkpoint(tmp_path / "m.ckpt", a2p, TINY)
    loaded, digest = ckpt.load_checkpoint(path, expected_cfg=TINY)
    assert digest == ckpt.config_digest(TINY)
    assert set(loaded) == set(a2p)
    for name in a2p:
        assert loaded[name].data.tobytes() == a2p[name].data.tobytes()
        assert loaded[name].requires_grad


def test_checkpoint_digest_mismatch(tiny_models, tmp_path):
    a2p, _, _ = tiny_models
    path = ckpt.save_checkpoint(tmp_path / "m.ckpt", a2p, TINY)
    other = ModelConfig(d_model=32, heads=2, target_vocab=20, phoneme_vocab=8)
    with pytest.raises(ValueError, match="digest"):
        ckpt.load_checkpoint(path, expected_cfg=other)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        ckpt.load_checkpoint(path)


def test_average_checkpoints_identity_and_mean(tiny_models, tmp_path):
    a2p, _, _ = tiny_models
    paths = []
    rng = np.random.default_rng(33)
    snapshots = []
    for k in range(5):
        params = {name: Tensor(t.data + rng.standard_normal(t.shape), requires_grad=True)
                  for name, t in a2p.items()}
        snapshots.append(params)
        paths.append(ckpt.save_checkpoint(tmp_path / f"e{k}.ckpt", params, TINY))

    out1 = ckpt.average_checkpoints([paths[2]], tmp_path / "avg1.ckpt")
    only, _ = ckpt.load_checkpoint(out1)
    for name in a2p:
        assert only[name].data.tobytes() == snapshots[2][name].data.tobytes()

    out5 = ckpt.average_checkpoints(paths, tmp_path / "avg5.ckpt")
    mean, _ = ckpt.load_checkpoint(out5)
    for name in a2p:
        want = np.mean(np.stack([s[name].data for s in snapshots]), axis=0)
        np.testing.assert_allclose(mean[name].data, want, atol=1e-15)


def test_average_checkpoints_mismatch_lists_offenders(tiny_models, tmp_path):
    a2p, _, _ = tiny_models
    p1 = ckpt.save_checkpoint(tmp_path / "a.ckpt", a2p, TINY)
    bad = dict(a2p)
    bad.pop("a2p.ctc_proj.b")
    p2 = ckpt.save_checkpoint(tmp_path / "b.ckpt", bad, TINY)
    with pytest.raises(ValueError, match="a2p.ctc_proj.b"):
        ckpt.average_checkpoints([p1, p2], tmp_path / "avg.ckpt")
