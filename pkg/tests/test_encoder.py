import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logicfusion import autodiff as ad
from logicfusion.autodiff import Tensor, grad_check
from logicfusion.corpus import AnnotatedSentence, RelationTriple, Vocab
from logicfusion.encoder import (
    CheckpointError,
    EncoderConfig,
    EncoderParams,
    bigru,
    decode_entities,
    embed,
    encode,
    forward,
    gru_cell,
    load_checkpoint,
    load_embeddings,
    multi_head_attention,
    positional_encoding,
    save_checkpoint,
    score_relations,
)
from logicfusion.trainer import sentence_prediction_loss

SMALL = EncoderConfig(word_dim=8, pos_dim=4, hidden_dim=8, label_dim=4, n_heads=2, n_layers=1)

SENT = AnnotatedSentence(
    ["anna", "smith", "lives", "in", "oslo", "."],
    ["NNP", "NNP", "VBZ", "IN", "NNP", "."],
    ["B-person", "I-person", "O", "O", "B-location", "O"],
    [RelationTriple((0, 2), (4, 5), "live_in")],
    "t0",
)
OTHER = AnnotatedSentence(
    ["acme", "corp", "is", "based", "in", "oslo"],
    ["NNP", "NNP", "VBZ", "VBN", "IN", "NNP"],
    ["B-organization", "I-organization", "O", "O", "O", "B-location"],
    [RelationTriple((0, 2), (5, 6), "located_in")],
    "t1",
)
VOCAB = Vocab.build([SENT, OTHER])


def make_params(config=SMALL, seed=0):
    return EncoderParams.initialize(config, VOCAB, np.random.default_rng(seed))


def gru_reference(x, params, prefix):
    """Bi-GRU by unrolling the primitive-op cell."""
    m = x.shape[0]
    out = {}
    for direction, order in (("fwd", range(m)), ("bwd", range(m - 1, -1, -1))):
        W, U, b = (params[f"{prefix}.{direction}.{n}"] for n in "WUb")
        h = Tensor(np.zeros((1, U.shape[0])))
        rows = {}
        for t in order:
            h = gru_cell(ad.getitem(x, slice(t, t + 1)), h, W, U, b)
            rows[t] = h
        out[direction] =ad.reshape(ad.stack([rows[t] for t in range(m)]), (m, U.shape[0]))
    return ad.concat([out["fwd"], out["bwd"]], axis=-1)


def test_fused_gru_matches_primitive_cells():
    params = make_params()
    x = Tensor(np.random.default_rng(1).normal(size=(5, SMALL.input_dim)))
    np.testing.assert_allclose(bigru(x, params, "gru.0").data, gru_reference(x, params, "gru.0").data, atol=1e-13)


def test_fused_gru_gradients_match_primitive_cells():
    params = make_params()
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(4, SMALL.input_dim)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, SMALL.hidden_dim)))
    names = [f"gru.0.{d}.{n}" for d in ("fwd", "bwd") for n in "WUb"]
    ad.backward((bigru(x, params, "gru.0") * w).sum())
    fused = [x.grad.copy()] + [params[n].grad.copy() for n in names]
    x.grad = None
    params.zero_grad()
    ad.backward((gru_reference(x, params, "gru.0") * w).sum())
    reference = [x.grad] + [params[n].grad for n in names]
    for a, b in zip(fused, reference):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_bigru_finite_differences():
    params = make_params()
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, SMALL.input_dim)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, SMALL.hidden_dim)))
    named = {n: params[n] for n in ("gru.0.fwd.W", "gru.0.fwd.U", "gru.0.bwd.U", "gru.0.bwd.b")}
    named["x"] = x
    report = grad_check(lambda: (bigru(x, params, "gru.0") * w).sum(), named)
    assert report.passed, report.errors


def test_bigru_single_step_is_one_cell():
    params = make_params()
    x = Tensor(np.random.default_rng(4).normal(size=(1, SMALL.input_dim)))
    out = bigru(x, params, "gru.0").data
    zero = Tensor(np.zeros((1, SMALL.hidden_dim // 2)))
    for half, d in ((slice(0, 4), "fwd"), (slice(4, 8), "bwd")):
        cell = gru_cell(x, zero, *(params[f"gru.0.{d}.{n}"] for n in "WUb"))
        np.testing.assert_allclose(out[:, half], cell.data, atol=1e-15)


def test_bigru_reversal_swaps_directions():
    params = make_params()
    # tie the two directions so reversal is an exact symmetry
    for n in "WUb":
        params[f"gru.0.bwd.{n}"].data[...] = params[f"gru.0.fwd.{n}"].data
    X = np.random.default_rng(5).normal(size=(6, SMALL.input_dim))
    out = bigru(Tensor(X), params, "gru.0").data
    rev = bigru(Tensor(X[::-1].copy()), params, "gru.0").data
    np.testing.assert_allclose(rev[::-1, :4], out[:, 4:], atol=1e-14)
    np.testing.assert_allclose(rev[::-1, 4:], out[:, :4], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.data())
def test_bigru_causality(m, data):
    j = data.draw(st.integers(0, m - 1))
    params = make_params()
    X = np.random.default_rng(m).normal(size=(m, SMALL.input_dim))
    base = bigru(Tensor(X), params, "gru.0").data
    X2 = X.copy()
    X2[j] += 1.0
    moved = bigru(Tensor(X2), params, "gru.0").data
    assert np.all(moved[:j, :4] == base[:j, :4])
    assert np.all(moved[j + 1:, 4:] == base[j + 1:, 4:])


def naive_attention(H, params, layer, n_heads):
    m, hidden = H.shape
    dh = hidden // n_heads
    Q, K, V = (H @ params[f"attn.{layer}.W{p}"].data for p in "qkv")
    alpha = np.zeros((n_heads, m, m))
    merged = np.zeros((m, hidden))
    for c in range(n_heads):
        cols = slice(c * dh, (c + 1) * dh)
        for i in range(m):
            scores = [float(Q[i, cols] @ K[j, cols]) / math.sqrt(hidden) for j in range(m)]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(m):
                alpha[c, i, j] = weights[j] / total
                merged[i, cols] += alpha[c, i, j] * V[j, cols]
    return merged @ params[f"attn.{layer}.Wo"].data, alpha


@pytest.mark.parametrize("m", [1, 2, 7])
def test_attention_matches_naive_loops(m):
    params = make_params()
    H = np.random.default_rng(m).normal(size=(m, SMALL.hidden_dim))
    out, alpha = multi_head_attention(Tensor(H), params, 1, SMALL.n_heads)
    ref_out, ref_alpha = naive_attention(H, params, 1, SMALL.n_heads)
    np.testing.assert_allclose(alpha.data, ref_alpha, atol=1e-10)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-10)
    np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-12)
    if m == 1:
        assert np.all(alpha.data == 1.0)


def test_embed_rows_and_positional_encoding():
    params = make_params()
    cfg_off = EncoderConfig(**{**SMALL.to_dict(), "use_positional_encoding": False})
    plain = embed(SENT, VOCAB, params, cfg_off).data
    with_pe = embed(SENT, VOCAB, params, SMALL).data
    w = VOCAB.words["oslo"]
    p = VOCAB.pos["NNP"]
    np.testing.assert_array_equal(plain[4], np.concatenate([params["emb.word"].data[w], params["emb.pos"].data[p]]))
    np.testing.assert_allclose(with_pe - plain, positional_encoding(len(SENT), SMALL.input_dim), atol=1e-15)
    oov = AnnotatedSentence(["zzz"], ["XX"], ["O"], [])
    np.testing.assert_array_equal(embed(oov, VOCAB, params, cfg_off).data[0, :8], params["emb.word"].data[1])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 20))
def test_encode_shapes(m):
    sent = AnnotatedSentence(["anna"] * m, ["NNP"] * m, ["O"] * m, [])
    params = make_params()
    h, alphas = encode(sent, VOCAB, params, SMALL)
    assert h.shape == (m, SMALL.hidden_dim)
    assert len(alphas) == 1 and alphas[0].shape == (2, m, m)


def test_encode_without_layers_is_first_bigru():
    cfg = EncoderConfig(**{**SMALL.to_dict(), "n_layers": 0})
    params = make_params(cfg)
    h, alphas = encode(SENT, VOCAB, params, cfg)
    x = embed(SENT, VOCAB, params, cfg)
    assert alphas == []
    np.testing.assert_array_equal(h.data, bigru(x, params, "gru.0").data)
    res = forward(SENT, VOCAB, params, cfg, mode="gold", entities=SENT.entities())
    assert res.relation_probs.shape == (2, len(VOCAB.relations))


def test_distributions_are_normalized():
    res = forward(SENT, VOCAB, make_params(), SMALL, mode="gold", entities=SENT.entities())
    for probs in (res.entity_probs.data, res.relation_probs.data, res.attention[0].data):
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
        assert np.all((probs > 0) & (probs < 1))


def test_gold_mode_equals_scheduled_with_certainty():
    params = make_params()
    h, _ = encode(SENT, VOCAB, params, SMALL)
    gold = VOCAB.tag_ids(SENT.entity_labels)
    a = decode_entities(h, params, len(VOCAB.tags), "gold", gold)
    b = decode_entities(h, params, len(VOCAB.tags), ("scheduled", 1.0), gold, np.random.default_rng(0))
    np.testing.assert_array_equal(a[1].data, b[1].data)
    np.testing.assert_array_equal(a[2], np.argmax(a[1].data, axis=-1))


def test_predicted_mode_feeds_own_argmax():
    params = make_params()
    h, _ = encode(SENT, VOCAB, params, SMALL)
    _, probs, pred, fed = decode_entities(h, params, len(VOCAB.tags), "predicted")
    np.testing.assert_array_equal(pred, fed)


def test_candidate_pairs():
    params = make_params()
    h, alphas = encode(SENT, VOCAB, params, SMALL)
    labels = VOCAB.tag_ids(SENT.entity_labels)
    assert score_relations(h, alphas, [], labels, params, 2)[0] == []
    assert score_relations(h, alphas, [((0, 2), "person")], labels, params, 2)[0] == []
    ents = [((0, 2), "person"), ((2, 3), "x"), ((4, 5), "location")]
    pairs, logits, probs = score_relations(h, alphas, ents, labels, params, 2)
    assert len(pairs) == 6 and probs.shape == (6, len(VOCAB.relations))


def test_forward_is_deterministic_without_dropout():
    params = make_params()
    a = forward(SENT, VOCAB, params, SMALL)
    b = forward(SENT, VOCAB, params, SMALL)
    assert np.array_equal(a.entity_probs.data, b.entity_probs.data)
    assert a.entities == b.entities


def test_full_model_gradient_check():
    params = make_params()

    def loss():
        res = forward(SENT, VOCAB, params, SMALL, mode="gold", entities=SENT.entities())
        return sentence_prediction_loss(res, SENT, VOCAB)

    report = grad_check(loss, dict(params.items()))
    assert report.passed, report.worst


def test_checkpoint_round_trip(tmp_path):
    params = make_params()
    weights = [Tensor(2.0, requires_grad=True), Tensor(-0.5, requires_grad=True)]
    path = tmp_path / "model.npz"
    save_checkpoint(path, params, SMALL, VOCAB, weights)
    loaded, cfg, vocab, raw, meta = load_checkpoint(path)
    assert cfg == SMALL and vocab.to_dict() == VOCAB.to_dict() and raw == [2.0, -0.5]
    for name, t in params.items():
        assert np.array_equal(loaded[name].data, t.data)
    with np.load(path) as data:
        assert data["emb.word"].dtype == np.dtype("<f8")


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "model.npz"
    save_checkpoint(path, make_params(), SMALL, VOCAB)
    wider = EncoderConfig(**{**SMALL.to_dict(), "hidden_dim": 12})
    with pytest.raises(CheckpointError, match="gru.0.fwd.W"):
        load_checkpoint(path, wider)


def test_load_embeddings(tmp_path):
    params = make_params()
    path = tmp_path / "vec.txt"
    path.write_text("oslo " + " ".join(["0.5"] * 8) + "\nnope 1 2\n")
    assert load_embeddings(params, VOCAB, path) == 1
    assert np.all(params["emb.word"].data[VOCAB.words["oslo"]] == 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(hidden_dim=10, n_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(hidden_dim=9, n_heads=1)
    with pytest.raises(ValueError):
        EncoderConfig(word_dim=0)
