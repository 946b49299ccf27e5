"""Vocabulary layout, prompt construction, causal forward contracts, the
constrained class readout, and greedy explanation decoding."""

import numpy as np
import pytest

from actok import autograd as ag
from actok.autograd import ConfigError
from actok.lm import (ANS_ID, BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID,
                      DEFAULT_INSTRUCTION, LanguageModel, LmConfig, PromptError,
                      Vocabulary, build_prompt, build_training_sequence,
                      classify, classify_batch, generate_explanation,
                      generate_explanations, install_semantic_embeddings,
                      stack_sequences)
from actok.lora import AdapterConfig, attach_adapters

VOCAB = Vocabulary.build(semantic_size=16, num_classes=4)
TINY = LmConfig(embed_dim=16, layers=2, heads=2, ffn_dim=32, context=48)


def tiny_model(seed: int = 0) -> LanguageModel:
    return LanguageModel(TINY, VOCAB, np.random.default_rng(seed))


def force_next_token(model: LanguageModel, token_id: int) -> None:
    """Rig the output head so every position predicts `token_id`."""
    model.head.w.data[:] = 0.0
    model.head.b.data[:] = 0.0
    model.head.b.data[token_id] = 10.0


# ---------------------------------------------------------------------------
# vocabulary


def test_vocabulary_layout_is_dense_and_unique():
    seen = set()
    for i in range(VOCAB.size):
        s = VOCAB.token_string(i)
        assert s not in seen
        seen.add(s)
    assert (PAD_ID, BOS_ID, SEP_ID, ANS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3, 4, 5)
    assert VOCAB.token_string(VOCAB.semantic_offset) == "<v0>"
    assert VOCAB.token_string(VOCAB.class_offset + 3) == "<cls_3>"
    assert VOCAB.class_offset - VOCAB.semantic_offset == 16  # block size == V
    with pytest.raises(ConfigError):
        VOCAB.token_string(VOCAB.size)


def test_default_instruction_golden_ids():
    # frozen against the standard vocabulary build (120 text words)
    assert len(VOCAB.words) == 120
    ids = VOCAB.encode_text(DEFAULT_INSTRUCTION)
    assert ids.tolist() == [66, 44, 105, 7, 45, 107, 116, 120, 46, 41]
    assert VOCAB.decode(ids) == ["please", "identify", "the", "action", "in",
                                 "this", "video.", "what", "is", "happening?"]


def test_unknown_words_map_to_unk():
    ids = VOCAB.encode_text("please summarize the zorp")
    assert ids[1] == UNK_ID
    assert ids[3] == UNK_ID
    assert ids[0] == VOCAB.word_id("please") != UNK_ID


def test_vocabulary_validation():
    with pytest.raises(ConfigError, match="unique"):
        Vocabulary(("a", "a"), 4, 2)
    with pytest.raises(ConfigError, match="invalid"):
        Vocabulary(("Upper",), 4, 2)
    with pytest.raises(ConfigError, match="invalid"):
        Vocabulary(("two words",), 4, 2)
    with pytest.raises(ConfigError):
        Vocabulary(("ok",), 0, 2)


def test_class_and_semantic_id_helpers():
    assert VOCAB.class_of(VOCAB.class_token_id(2)) == 2
    assert VOCAB.is_class_token(VOCAB.class_token_id(0))
    assert not VOCAB.is_class_token(VOCAB.semantic_id(0))
    with pytest.raises(ConfigError):
        VOCAB.class_token_id(4)
    with pytest.raises(ConfigError):
        VOCAB.semantic_id(16)
    with pytest.raises(ConfigError):
        VOCAB.class_of(BOS_ID)


# ---------------------------------------------------------------------------
# prompts


def test_prompt_worked_example():
    prompt = build_prompt(VOCAB, [5], "what action")
    assert prompt.tolist() == [BOS_ID, VOCAB.semantic_id(5), SEP_ID,
                               VOCAB.word_id("what"), VOCAB.word_id("action"),
                               ANS_ID]
    assert prompt.tolist() == [1, 131, 2, 120, 7, 3]  # frozen ids


def test_prompt_rejects_empty_parts():
    with pytest.raises(PromptError, match="empty"):
        build_prompt(VOCAB, [], "what action")
    with pytest.raises(PromptError, match="empty"):
        build_prompt(VOCAB, [5], "   ")


def test_prompt_overflow_reports_lengths():
    with pytest.raises(PromptError, match=r"length 16 exceeds context 10"):
        build_prompt(VOCAB, list(range(12)), "x", context=10)


def test_training_sequence_layout():
    ids, ans = build_training_sequence(VOCAB, [1, 2], "what action",
                                       class_id=3, explanation="wave then bow")
    prompt = build_prompt(VOCAB, [1, 2], "what action")
    assert ans == len(prompt) - 1
    assert ids[ans] == ANS_ID
    assert ids[ans + 1] == VOCAB.class_token_id(3)
    assert ids[-1] == EOS_ID
    assert VOCAB.decode(ids[ans + 2:-1]) == ["wave", "then", "bow"]
    with pytest.raises(PromptError, match="exceeds context"):
        build_training_sequence(VOCAB, [1, 2], "what action", 3,
                                "wave then bow", context=8)


def test_stack_sequences():
    ids, offsets = stack_sequences([np.array([1, 2]), np.array([3])])
    assert ids.tolist() == [1, 2, 3]
    assert offsets.tolist() == [0, 2, 3]
    with pytest.raises(PromptError):
        stack_sequences([])


# ---------------------------------------------------------------------------
# forward contracts


def test_forward_shape_and_determinism():
    model = tiny_model()
    prompt = build_prompt(VOCAB, [0, 3, 7], DEFAULT_INSTRUCTION)
    a = model(prompt).data
    b = model(prompt).data
    assert a.shape == (prompt.size, VOCAB.size)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_causality_is_exact():
    model = tiny_model()
    rng = np.random.default_rng(1)
    ids = rng.integers(0, VOCAB.size, size=20).astype(np.int64)
    base = model(ids).data
    for j in (5, 12, 19):
        mutated = ids.copy()
        mutated[j] = (mutated[j] + 1) % VOCAB.size
        out = model(mutated).data
        assert np.array_equal(out[:j], base[:j]), f"position {j} leaked backward"
        assert not np.array_equal(out[j], base[j])


def test_forward_validation():
    model = tiny_model()
    with pytest.raises(ConfigError, match="vocabulary"):
        model(np.array([VOCAB.size], dtype=np.int64))
    with pytest.raises(ConfigError, match="context"):
        model(np.zeros(TINY.context + 1, dtype=np.int64))
    with pytest.raises(ConfigError, match="non-empty"):
        model(np.array([], dtype=np.int64))


def test_batched_forward_equals_single():
    # matrix products block differently for different row counts, so raw
    # logits agree to reduction-order noise; discrete readouts are exact
    model = tiny_model()
    rng = np.random.default_rng(2)
    seqs = [rng.integers(0, VOCAB.size, size=n).astype(np.int64)
            for n in (4, 9, 1, 13)]
    ids, offsets = stack_sequences(seqs)
    stacked = model(ids, offsets).data
    for i, s in enumerate(seqs):
        solo = model(s).data
        np.testing.assert_allclose(stacked[offsets[i]:offsets[i + 1]], solo,
                                   rtol=0, atol=1e-12)


def test_embedded_path_matches_id_path():
    model = tiny_model()
    prompt = build_prompt(VOCAB, [2, 5], "what action")
    rows = ag.constant(model.embed.data[prompt])
    via_ids = model(prompt).data
    via_rows = model.forward_embedded(
        rows, np.array([0, prompt.size], dtype=np.int64)).data
    assert np.array_equal(via_ids, via_rows)


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        LmConfig(embed_dim=10, heads=4)
    with pytest.raises(ConfigError, match="layers"):
        LmConfig(layers=0)


# ---------------------------------------------------------------------------
# class readout


def test_classify_forced_argmax():
    model = tiny_model()
    force_next_token(model, VOCAB.class_token_id(3))
    for seq in ([0], [1, 2, 3], list(range(10))):
        assert classify(model, seq) == 3


def test_classify_tie_breaks_to_lowest_class():
    model = tiny_model()
    model.head.w.data[:] = 0.0
    model.head.b.data[:] = 0.0  # every class logit exactly 0
    assert classify(model, [4, 4]) == 0
    model.head.b.data[VOCAB.class_token_id(1)] = 5.0
    model.head.b.data[VOCAB.class_token_id(2)] = 5.0  # exact tie at 5
    assert classify(model, [4, 4]) == 1


def test_classify_ignores_non_class_logits():
    model = tiny_model()
    force_next_token(model, VOCAB.class_token_id(2))
    model.head.b.data[VOCAB.word_id("wave")] = 99.0  # huge but outside block
    assert classify(model, [7]) == 2


def test_classify_invariant_under_uniform_shift():
    model = tiny_model(seed=5)
    rng = np.random.default_rng(3)
    seqs = [rng.integers(0, 16, size=6).astype(np.int64) for _ in range(8)]
    before = classify_batch(model, seqs)
    lo, hi = VOCAB.class_offset, VOCAB.size
    model.head.b.data[lo:hi] += 3.75  # same monotone shift on every class
    after = classify_batch(model, seqs)
    assert np.array_equal(before, after)


def test_classify_batch_equals_single():
    model = tiny_model(seed=7)
    rng = np.random.default_rng(4)
    seqs = [rng.integers(0, 16, size=rng.integers(2, 12)).astype(np.int64)
            for _ in range(10)]
    batched = classify_batch(model, seqs, batch_size=3)
    solo = np.array([classify(model, s) for s in seqs])
    assert np.array_equal(batched, solo)


# ---------------------------------------------------------------------------
# explanation decoding


def test_generation_stops_at_eos():
    model = tiny_model()
    force_next_token(model, EOS_ID)
    words, truncated = generate_explanation(model, [1, 2], class_id=0)
    assert words == []
    assert truncated is False


def test_generation_truncates_at_max_len():
    model = tiny_model()
    force_next_token(model, VOCAB.word_id("wave"))
    words, truncated = generate_explanation(model, [1], class_id=1, max_len=5)
    assert words == ["wave"] * 5
    assert truncated is True


def test_generation_max_len_zero():
    model = tiny_model()
    words, truncated = generate_explanation(model, [1], class_id=0, max_len=0)
    assert words == []
    assert truncated is True


def test_generation_is_deterministic():
    model = tiny_model(seed=11)
    a = generate_explanation(model, [3, 1, 4], class_id=2, max_len=8)
    b = generate_explanation(model, [3, 1, 4], class_id=2, max_len=8)
    assert a == b


def test_generation_batch_equals_single():
    model = tiny_model(seed=13)
    rng = np.random.default_rng(6)
    seqs = [rng.integers(0, 16, size=rng.integers(1, 8)).astype(np.int64)
            for _ in range(6)]
    classes = rng.integers(0, 4, size=6)
    batch_words, batch_trunc = generate_explanations(
        model, seqs, classes, max_len=6)
    for i, s in enumerate(seqs):
        w, t = generate_explanation(model, s, int(classes[i]), max_len=6)
        assert w == batch_words[i]
        assert t == batch_trunc[i]


def test_generation_respects_context_limit():
    cfg = LmConfig(embed_dim=16, layers=1, heads=2, ffn_dim=32, context=24)
    model = LanguageModel(cfg, VOCAB, np.random.default_rng(0))
    force_next_token(model, VOCAB.word_id("wave"))
    prompt = build_prompt(VOCAB, list(range(8)), "what action")
    room = cfg.context - (prompt.size + 1)  # slots left after class token
    words, truncated = generate_explanation(model, list(range(8)), 0,
                                            instruction="what action",
                                            max_len=50)
    assert len(words) == room
    assert truncated is True


# ---------------------------------------------------------------------------
# adapters and codebook integration


def test_zero_adapter_leaves_outputs_bitwise_unchanged():
    model = tiny_model(seed=17)
    rng = np.random.default_rng(8)
    seqs = [rng.integers(0, 16, size=5).astype(np.int64) for _ in range(4)]
    before_cls = classify_batch(model, seqs)
    before_gen = generate_explanations(model, seqs, before_cls, max_len=6)
    prompt = build_prompt(VOCAB, [1, 2, 3], DEFAULT_INSTRUCTION)
    before_logits = model(prompt).data

    attach_adapters(model, AdapterConfig(), np.random.default_rng(9))
    assert np.array_equal(model(prompt).data, before_logits)
    assert np.array_equal(classify_batch(model, seqs), before_cls)
    assert generate_explanations(model, seqs, before_cls, max_len=6) == before_gen


def test_install_semantic_embeddings():
    model = tiny_model(seed=19)
    text_before = model.embed.data[:VOCAB.semantic_offset].copy()
    class_before = model.embed.data[VOCAB.class_offset:].copy()
    rng = np.random.default_rng(10)
    rows = rng.normal(0.0, 2.0, (16, TINY.embed_dim))

    scale = install_semantic_embeddings(model, rows)
    block = model.embed.data[VOCAB.semantic_offset:VOCAB.class_offset]
    assert np.array_equal(block, rows * scale)
    # global rescale: block RMS now matches the text block RMS
    text = model.embed.data[VOCAB.text_offset:VOCAB.semantic_offset]
    assert np.sqrt((block ** 2).mean()) == pytest.approx(
        np.sqrt((text ** 2).mean()), rel=1e-12)
    # geometry preserved up to the single scalar
    d_orig = np.linalg.norm(rows[0] - rows[1])
    d_new = np.linalg.norm(block[0] - block[1])
    assert d_new == pytest.approx(scale * d_orig, rel=1e-12)
    # everything outside the block untouched
    assert np.array_equal(model.embed.data[:VOCAB.semantic_offset], text_before)
    assert np.array_equal(model.embed.data[VOCAB.class_offset:], class_before)

    with pytest.raises(ConfigError, match="does not match"):
        install_semantic_embeddings(model, rows[:, :4])


# ---------------------------------------------------------------------------
# gradients


def test_answer_position_loss_backward():
    model = tiny_model(seed=23)
    ids, ans = build_training_sequence(VOCAB, [3, 9], "what action",
                                       class_id=1, explanation="wave then bow")
    logits = model(ids)
    rows = ag.gather_rows(logits, np.arange(ans, ids.size - 1))
    loss = ag.cross_entropy(rows, ids[ans + 1:])
    loss.backward()
    grads = {n: p.grad for n, p in model.named_parameters() if p.grad is not None}
    assert any(np.abs(g).max() > 0 for g in grads.values())
    assert "embed" in grads and "head.w" in grads


def test_lm_gradcheck():
    vocab = Vocabulary(("go", "halt"), semantic_size=3, num_classes=2)
    cfg = LmConfig(embed_dim=8, layers=1, heads=2, ffn_dim=12, context=16)
    model = LanguageModel(cfg, vocab, np.random.default_rng(29))
    for p in model.parameters():  # move residual branches off their zero init
        if p.data.ndim == 2 and not p.data.any():
            p.data += np.random.default_rng(31).normal(0.0, 0.05, p.data.shape)
    ids, ans = build_training_sequence(vocab, [0, 2], "go", 1, "halt go")

    def loss_fn():
        logits = model(ids)
        rows = ag.gather_rows(logits, np.arange(ans, ids.size - 1))
        return ag.cross_entropy(rows, ids[ans + 1:])

    worst = ag.grad_check(loss_fn, [p for _, p in model.trainable_parameters()])
    assert worst < 1e-4, f"worst relative gradient error {worst}"
