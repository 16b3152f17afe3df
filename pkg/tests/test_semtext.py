from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcslu.semtext import (
    EmptyReference,
    IntentNode,
    MalformedParse,
    SemanticParse,
    SlotNode,
    deserialize,
    deserialize_str,
    edit_distance,
    exact_match,
    linearize,
    linearize_str,
    normalize_for_match,
    wer,
)

# ---------------------------------------------------------------------------
# linearize / deserialize


def test_linearize_intent_with_slot():
    parse = SemanticParse(
        IntentNode("IN:CREATE_ALARM", (SlotNode("SL:DATE_TIME", ("tomorrow",)),))
    )
    assert linearize_str(parse) == "[IN:CREATE_ALARM [SL:DATE_TIME tomorrow ] ]"


def test_linearize_intent_without_slots():
    parse = SemanticParse(IntentNode("IN:X", ()))
    assert linearize_str(parse) == "[IN:X ]"


def test_deserialize_simple():
    parse = deserialize(["[IN:X", "]"])
    assert parse.root.label == "IN:X"
    assert parse.root.children == ()


def test_deserialize_words_and_slots():
    parse = deserialize_str("[IN:A foo [SL:B bar baz ] ]")
    assert parse.root.children[0] == "foo"
    slot = parse.root.children[1]
    assert isinstance(slot, SlotNode)
    assert slot.children == ("bar", "baz")


@pytest.mark.parametrize(
    "tokens",
    [
        ["[IN:X", "[SL:Y", "]"],  # unbalanced
        ["[IN:X"],  # never closed
        ["]"],  # close without open
        ["foo", "]"],  # root not an intent
        ["[SL:Y", "foo", "]"],  # root is a slot
        ["[IN:X", "]", "extra"],  # trailing tokens
        ["[IN:", "]"],  # empty intent symbol
        ["[IN:X", "[IN:Y", "]", "]"],  # intent directly inside intent
        [],
    ],
)
def test_deserialize_malformed(tokens):
    with pytest.raises(MalformedParse):
        deserialize(tokens)


def test_node_label_validation():
    with pytest.raises(MalformedParse):
        IntentNode("CREATE_ALARM", ())
    with pytest.raises(MalformedParse):
        SlotNode("DATE_TIME", ("x",))


_words = st.sampled_from(["set", "alarm", "tomorrow", "bob", "play"])


def _trees(depth: int) -> st.SearchStrategy:
    if depth == 0:
        slot = st.builds(
            SlotNode,
            st.sampled_from(["SL:X", "SL:Y"]),
            st.tuples(_words),
        )
    else:
        inner = st.builds(
            IntentNode,
            st.sampled_from(["IN:A", "IN:B"]),
            st.lists(st.one_of(_words, _trees(depth - 1)), max_size=2).map(tuple),
        )
        slot = st.builds(
            SlotNode,
            st.sampled_from(["SL:X", "SL:Y"]),
            st.lists(st.one_of(_words, inner), min_size=1, max_size=2).map(tuple),
        )
    return slot


@st.composite
def parses(draw):
    children = draw(st.lists(st.one_of(_words, _trees(1)), max_size=3).map(tuple))
    return SemanticParse(IntentNode(draw(st.sampled_from(["IN:A", "IN:B"])), children))


@settings(max_examples=300, deadline=None)
@given(parses())
def test_roundtrip_random_trees(parse):
    assert deserialize(linearize(parse)) == parse


@settings(max_examples=200, deadline=None)
@given(parses())
def test_canonical_string_is_fixed_point(parse):
    text = linearize_str(parse)
    assert linearize_str(deserialize_str(text)) == text


# ---------------------------------------------------------------------------
# exact match


def test_exact_match_ignores_case_and_punctuation():
    assert exact_match("[IN:X Foo ]", "[in:x foo ]")
    assert exact_match("[IN:X foo, bar! ]", "[IN:X foo bar ]")


def test_exact_match_preserves_structure_chars():
    assert not exact_match("[IN:X foo ]", "IN:X foo")
    assert not exact_match("[IN:X a ]", "[IN:X b ]")


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=30))
def test_exact_match_reflexive(s):
    assert exact_match(s, s)


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=20), st.text(max_size=20))
def test_exact_match_symmetric(a, b):
    assert exact_match(a, b) == exact_match(b, a)


def test_normalize_collapses_whitespace():
    assert normalize_for_match("  a\t b  ") == "a b"


# ---------------------------------------------------------------------------
# WER


def _brute_edit(ref, hyp):
    # exhaustive recursion over all alignments; the independent oracle
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        _brute_edit(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
        _brute_edit(ref[1:], hyp) + 1,
        _brute_edit(ref, hyp[1:]) + 1,
    )


def test_wer_identity():
    assert wer(["set", "alarm"], ["set", "alarm"]) == 0.0


def test_wer_single_substitution():
    assert wer(["a", "b", "c"], ["a", "x", "c"]) == pytest.approx(1 / 3)


def test_wer_can_exceed_one():
    assert wer(["a"], ["a", "b", "c"]) == 2.0


def test_wer_empty_reference():
    with pytest.raises(EmptyReference):
        wer([], ["a"])


def test_edit_distance_matches_brute_force_exhaustively():
    from itertools import product

    alphabet = "abc"
    seqs = [list(t) for n in range(5) for t in product(alphabet, repeat=n)]
    for ref in (s for s in seqs if s):
        for hyp in seqs:
            assert edit_distance(ref, hyp) == _brute_edit(ref, hyp), (ref, hyp)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sampled_from("abc"), min_size=1, max_size=5),
    st.lists(st.sampled_from("abc"), max_size=5),
)
def test_wer_nonnegative_and_zero_iff_equal(ref, hyp):
    value = wer(ref, hyp)
    assert value >= 0
    assert (value == 0) == (ref == hyp)
