import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpd.conditioning import (
    Caption,
    TextEmbedding,
    Vocabulary,
    aggregate,
    caption,
    embed,
    template_caption,
)
from dpd.data import CLASS_NAMES

VOCAB = Vocabulary.build(CLASS_NAMES, seed=0)
captions_st = st.lists(
    st.lists(st.integers(0, len(VOCAB.tokens) - 1), min_size=1, max_size=8).map(lambda t: Caption(tuple(t))),
    min_size=1,
    max_size=12,
)


def test_vocabulary_is_bijective_and_dumpable():
    assert len(set(VOCAB.tokens)) == len(VOCAB.tokens)
    assert all(VOCAB.tokens[VOCAB.id(t)] == t for t in VOCAB.tokens)
    dump = json.loads(VOCAB.to_json())
    assert dump["tokens"]["checker"] == VOCAB.id("checker")
    np.testing.assert_allclose(np.linalg.norm(VOCAB.table, axis=0), 1.0, atol=1e-12)
    assert VOCAB.class_names == CLASS_NAMES


def test_vocabulary_seeded_and_frozen():
    assert np.array_equal(Vocabulary.build(CLASS_NAMES, seed=0).table, VOCAB.table)
    assert not np.array_equal(Vocabulary.build(CLASS_NAMES, seed=1).table, VOCAB.table)
    with pytest.raises(ValueError):
        VOCAB.table[0, 0] = 1.0


def test_caption_identical_images_identical_captions():
    x = np.random.default_rng(0).uniform(size=(16, 16))
    assert caption(x, "disk", VOCAB) == caption(x.copy(), "disk", VOCAB)


def test_caption_all_zero_image():
    words = VOCAB.words(caption(np.zeros((16, 16)), "checker", VOCAB))
    assert words[0] == "checker"
    assert words[2] == "dark"
    assert words[3] == "top-left"  # no deviation anywhere: first quadrant wins the tie


def test_caption_quadrant_from_direct_sums():
    yy, xx = np.mgrid[0:16, 0:16]
    x = np.full((16, 16), 0.5)
    x[:8, :8] += 0.4 * np.sin(2 * np.pi * xx[:8, :8] / 4)  # stripes only in the top-left
    dev = (x - x.mean()) ** 2
    sums = [dev[:8, :8].sum(), dev[:8, 8:].sum(), dev[8:, :8].sum(), dev[8:, 8:].sum()]
    assert int(np.argmax(sums)) == 0
    assert VOCAB.words(caption(x, "stripes-v", VOCAB))[3] == "top-left"


@pytest.mark.parametrize("level,word", [(0.1, "dark"), (0.3, "dim"), (0.6, "bright"), (0.9, "vivid"), (1.0, "vivid")])
def test_brightness_quartiles(level, word):
    assert VOCAB.words(caption(np.full((16, 16), level), "disk", VOCAB))[2] == word


def test_pattern_mode_coarse_vs_fine():
    yy, xx = np.mgrid[0:16, 0:16]
    slow = 0.5 + 0.4 * np.sin(2 * np.pi * xx / 16)
    fast = 0.5 + 0.4 * np.sin(2 * np.pi * xx / 3)
    assert VOCAB.words(caption(slow, "stripes-v", VOCAB))[1] == "coarse"
    assert VOCAB.words(caption(fast, "stripes-v", VOCAB))[1] == "fine"


def test_unknown_class_name():
    with pytest.raises(KeyError):
        caption(np.zeros((16, 16)), "zebra", VOCAB)


def test_template_caption():
    assert VOCAB.words(template_caption("disk", VOCAB)) == ["disk"]


def test_aggregate_hand_count():
    a, b, c = 0, 5, 7
    out = aggregate([Caption((a, b)), Caption((a, c))], keep_ratio=0.5)
    assert out.tokens == (a, b, c)


def test_aggregate_identical_is_unchanged():
    cap = caption(np.full((16, 16), 0.4), "checker", VOCAB)
    assert aggregate([cap] * 5) == cap


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([])


@settings(max_examples=200)
@given(captions_st, st.floats(0.05, 1.0), st.integers(1, 8))
def test_aggregate_properties(caps, keep, cap):
    out = aggregate(caps, keep, cap)
    union = {t for c in caps for t in c.tokens}
    assert set(out.tokens) <= union
    assert len(out) <= cap
    assert len(set(out.tokens)) == len(out.tokens)
    # class token (most common lead) is always first
    leads = [c.tokens[0] for c in caps]
    best = min(set(leads), key=lambda t: (-leads.count(t), t))
    assert out.tokens[0] == best
    # idempotent as a single-caption input: same tokens, same class token;
    # the order of the rest can only change once (frequency order -> id order)
    again = aggregate([out], keep, cap)
    assert set(again.tokens) == set(out.tokens) and again.tokens[0] == out.tokens[0]
    assert aggregate([again], keep, cap) == again


@settings(max_examples=100)
@given(captions_st)
def test_embed_unit_norm_and_order_invariant(caps):
    cap = caps[0]
    e = embed(cap, VOCAB)
    TextEmbedding(e)  # validates unit norm to 1e-9
    rev = Caption(tuple(reversed(cap.tokens)))
    np.testing.assert_allclose(embed(rev, VOCAB), e, atol=1e-15)


def test_embed_single_token():
    i = VOCAB.id("fine")
    np.testing.assert_allclose(embed(Caption((i,)), VOCAB), VOCAB.table[:, i], atol=1e-15)


def test_embed_disjoint_captions_dissimilar():
    a = Caption((VOCAB.id("disk"), VOCAB.id("coarse"), VOCAB.id("dark"), VOCAB.id("top-left")))
    b = Caption((VOCAB.id("checker"), VOCAB.id("fine"), VOCAB.id("vivid"), VOCAB.id("bottom-right")))
    assert float(embed(a, VOCAB) @ embed(b, VOCAB)) < 0.5


def test_caption_validation():
    with pytest.raises(ValueError):
        Caption(())
    with pytest.raises(ValueError):
        Caption(tuple(range(9)))
    with pytest.raises(ValueError):
        Caption((64,))
    with pytest.raises(ValueError):
        TextEmbedding(np.ones(4))
