import math
import random

import pytest

from conftest import make_docs
from fablelm.tokenizer import (
    MARKER,
    SPECIAL_PIECES,
    UNK_ID,
    TokenizerError,
    TokenizerModel,
    _word_counts,
    corpus_log_likelihood,
    _em_step,
    decode,
    encode,
    load_tokenizer,
    save_tokenizer,
    train_unigram,
)


def brute_force_segment(pieces: dict[str, float], word: str):
    """Enumerate every segmentation; pick max by (score, fewer tokens,
    leftmost-longest), the last expressed as the lexicographically greatest
    tuple of piece lengths."""
    paths = []

    def walk(i, acc):
        if i == len(word):
            paths.append(list(acc))
            return
        for j in range(i + 1, len(word) + 1):
            if word[i:j] in pieces:
                acc.append(word[i:j])
                walk(j, acc)
                acc.pop()

    walk(0, [])
    assert paths, f"word {word!r} not coverable"
    return max(
        paths,
        key=lambda p: (
            sum(pieces[x] for x in p),
            -len(p),
            tuple(len(x) for x in p),
        ),
    )


def hand_model(scored_pieces: dict[str, float]) -> TokenizerModel:
    vocab = [(p, 0.0) for p in SPECIAL_PIECES] + sorted(
        scored_pieces.items(), key=lambda kv: (-kv[1], kv[0])
    )
    return TokenizerModel(kind="unigram", vocab=vocab, merges=[])


def test_viterbi_hand_case_prefers_score():
    model = hand_model({MARKER: -1.0, "a": -2.0, "b": -3.0, "ab": -4.0, MARKER + "a": -2.5})
    # [marker, ab] = -5.0 beats [marker+a, b] = -5.5 and [marker, a, b] = -6.0
    ids = encode(model, "ab")
    assert [model.vocab[i][0] for i in ids] == [MARKER, "ab"]


def test_viterbi_tie_prefers_fewer_tokens():
    model = hand_model({MARKER: -1.0, "a": -1.0, "aa": -2.0})
    # [marker, aa] and [marker, a, a] both score -3.0; fewer tokens wins
    ids = encode(model, "aa")
    assert [model.vocab[i][0] for i in ids] == [MARKER, "aa"]


def test_viterbi_tie_prefers_leftmost_longest():
    model = hand_model({MARKER: -1.0, "x": -1.0, "xx": -1.5, MARKER + "x": -1.5})
    # [marker+x, x] and [marker, xx] tie at -2.5 with 2 tokens each;
    # the longer first piece wins
    ids = encode(model, "xx")
    assert [model.vocab[i][0] for i in ids] == [MARKER + "x", "x"]


def test_viterbi_matches_brute_force_on_random_words():
    # dyadic scores (multiples of 1/16) keep every path sum exact, so score
    # ties are real and both implementations resolve them identically
    rng = random.Random(3)
    alphabet = "abcd"
    pieces = {MARKER: -1.0}
    for c in alphabet:
        pieces[c] = -rng.randint(8, 32) / 16.0
    for _ in range(40):
        length = rng.randint(2, 5)
        body = "".join(rng.choice(alphabet) for _ in range(length))
        p = MARKER + body if rng.random() < 0.3 else body
        pieces.setdefault(p, -rng.randint(4, 48) / 16.0)
    model = hand_model(pieces)
    for _ in range(500):
        word = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 9)))
        expect = brute_force_segment(pieces, MARKER + word)
        got = [model.vocab[i][0] for i in encode(model, word)]
        assert got == expect, f"word={word!r}"


def test_unknown_chars_become_per_character_unk(fable_docs):
    model = train_unigram(fable_docs, target_vocab=60)
    ids = encode(model, "lup ΩΨ urs")
    assert ids.count(UNK_ID) == 2


def test_scores_are_normalized_log_probs(fable_docs):
    model = train_unigram(fable_docs, target_vocab=60)
    total = sum(math.exp(s) for _, s in model.vocab[4:])
    assert total == pytest.approx(1.0, abs=1e-6)


def test_target_vocab_respected_and_singles_survive(fable_docs):
    model = train_unigram(fable_docs, target_vocab=48)
    assert model.vocab_size <= 48
    chars = {c for d in fable_docs for w in d.text.split() for c in MARKER + w}
    pieces = {p for p, _ in model.vocab[4:]}
    assert chars <= pieces


def test_target_below_char_inventory_rejected(fable_docs):
    with pytest.raises(TokenizerError, match="character inventory"):
        train_unigram(fable_docs, target_vocab=10)


def test_em_step_never_decreases_likelihood(fable_docs):
    word_counts = _word_counts(fable_docs)
    words = sorted(word_counts)
    subs = {w[i:j] for w in words for i in range(len(w)) for j in range(i + 1, min(len(w), i + 6) + 1)}
    probs = {p: 1.0 / len(subs) for p in subs}
    ll = corpus_log_likelihood(probs, words, word_counts)
    for _ in range(4):
        probs = _em_step(probs, words, word_counts)
        nxt = corpus_log_likelihood(probs, words, word_counts)
        assert nxt >= ll - 1e-9
        ll = nxt


def test_round_trip_random_texts(fable_docs):
    model = train_unigram(fable_docs, target_vocab=64)
    alphabet = sorted({c for d in fable_docs for c in d.text if c != " "})
    rng = random.Random(5)
    for _ in range(200):
        words = [
            "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 7)))
            for _ in range(rng.randint(1, 5))
        ]
        text = " ".join(words)
        assert decode(model, encode(model, text)) == text


def test_save_load_round_trip_and_byte_determinism(fable_docs, tmp_path):
    m1 = train_unigram(fable_docs, target_vocab=56)
    m2 = train_unigram(fable_docs, target_vocab=56)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_tokenizer(m1, p1)
    save_tokenizer(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = load_tokenizer(p1)
    assert loaded.vocab == m1.vocab
    assert loaded.kind == "unigram"
    text = fable_docs[0].text
    assert encode(loaded, text) == encode(m1, text)


def test_loader_rejects_bad_version(tmp_path):
    p = tmp_path / "t.json"
    p.write_text('{"version": 9, "kind": "bpe", "pieces": [], "merges": []}')
    with pytest.raises(TokenizerError, match="version"):
        load_tokenizer(p)
