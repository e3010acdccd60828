import math
import random
from collections import Counter

import pytest
import torch

import fablelm.metrics as metrics
from fablelm.metrics import (
    Gazetteer,
    MetricError,
    MinimalPair,
    agreement,
    basic_error_count,
    count_syllables,
    distinct_n,
    entity_coherence,
    find_mentions,
    grammar_score,
    intrinsic,
    load_gazetteer,
    load_probes,
    readability,
    self_bleu,
    throughput,
)
from fablelm.model import Checkpoint, ModelConfig, init_checkpoint
from fablelm.tokenizer import MARKER, SPECIAL_PIECES, TokenizerModel


def zero_ckpt(vocab=50, tie=True):
    cfg = ModelConfig(vocab_size=vocab, n_layers=1, hidden=4, n_heads=1, head_dim=4,
                      mlp_dim=4, max_seq=32, tie_embeddings=tie)
    ckpt = init_checkpoint(cfg, seed=0)
    return Checkpoint(cfg, {n: torch.zeros_like(t) for n, t in ckpt.tensors.items()})


def char_model(chars: str) -> TokenizerModel:
    vocab = [(p, 0.0) for p in SPECIAL_PIECES] + [(c, -1.0) for c in MARKER + chars]
    return TokenizerModel(kind="unigram", vocab=vocab, merges=[])


# -- intrinsic ---------------------------------------------------------------


def test_intrinsic_uniform_model():
    ce, ppl = intrinsic(zero_ckpt(vocab=50), [[1, 2, 3, 4, 5, 6]])
    assert ce == pytest.approx(math.log(50), rel=1e-6)
    assert ppl == math.exp(ce)


def test_intrinsic_half_prob_model():
    # an all-zero model over a 2-token vocab gives every next token prob 0.5
    ce, _ = intrinsic(zero_ckpt(vocab=2), [[0, 1, 0, 1, 1, 0]])
    assert ce == pytest.approx(math.log(2), rel=1e-6)


def test_intrinsic_empty_blocks():
    with pytest.raises(MetricError, match="no blocks"):
        intrinsic(zero_ckpt(), torch.zeros(0, 8, dtype=torch.long))


def test_ppl_is_exp_of_ce_for_random_model():
    ckpt = init_checkpoint(ModelConfig(16, 1, 4, 1, 4, 4, max_seq=16), seed=3)
    blocks = torch.randint(0, 16, (3, 10))
    ce, ppl = intrinsic(ckpt, blocks)
    assert ppl == math.exp(ce)


# -- agreement ---------------------------------------------------------------


def biased_ckpt(model, favored: str, disfavored: str):
    """Constant-logit model: logit of piece p = rowsum of its output row."""
    cfg = ModelConfig(vocab_size=model.vocab_size, n_layers=1, hidden=4, n_heads=1,
                      head_dim=4, mlp_dim=4, max_seq=64, tie_embeddings=False)
    base = init_checkpoint(cfg, seed=0)
    tensors = {
        n: (torch.ones_like(t) if n.endswith("norm.weight") else torch.zeros_like(t))
        for n, t in base.tensors.items()
    }
    tensors["embed.weight"] = torch.ones(cfg.vocab_size, cfg.hidden)
    head = torch.zeros(cfg.vocab_size, cfg.hidden)
    pieces = {p: i for i, (p, _) in enumerate(model.vocab)}
    for c in favored:
        head[pieces[c]] = 1.0
    for c in disfavored:
        head[pieces[c]] = -1.0
    tensors["lm_head.weight"] = head
    return Checkpoint(cfg, tensors)


def test_agreement_prefers_higher_logprob():
    model = char_model("daun")
    ckpt = biased_ckpt(model, favored="da", disfavored="nu")
    pairs = [MinimalPair(prefix="a", grammatical="da", ungrammatical="nu")]
    assert agreement(ckpt, model, pairs) == 1.0
    flipped = [MinimalPair(prefix="a", grammatical="nu", ungrammatical="da")]
    assert agreement(ckpt, model, flipped) == 0.0


def test_agreement_ties_count_incorrect():
    model = char_model("ab")
    pairs = [MinimalPair(prefix="a", grammatical="b", ungrammatical="a")]
    assert agreement(zero_ckpt(vocab=model.vocab_size), model, pairs) == 0.0


def test_agreement_balanced_mirror_is_half():
    model = char_model("abcd")
    ckpt = init_checkpoint(
        ModelConfig(model.vocab_size, 1, 8, 2, 4, 8, max_seq=64), seed=11
    )
    rng = random.Random(0)
    pairs = []
    for _ in range(100):
        a = "".join(rng.choice("abcd") for _ in range(3))
        b = "".join(rng.choice("abcd") for _ in range(3))
        if a == b:
            b = a[:-1] + ("a" if a[-1] != "a" else "b")
        prefix = "".join(rng.choice("abcd") for _ in range(2))
        pairs.append(MinimalPair(prefix=prefix, grammatical=a, ungrammatical=b))
        pairs.append(MinimalPair(prefix=prefix, grammatical=b, ungrammatical=a))
    acc = agreement(ckpt, model, pairs)
    assert 0.4 <= acc <= 0.6  # mirrored pairs force 0.5 apart from exact ties


def test_agreement_empty_continuation_rejected():
    model = char_model("ab")
    pairs = [MinimalPair(prefix="a", grammatical=" ", ungrammatical="b")]
    with pytest.raises(MetricError, match="empty"):
        agreement(zero_ckpt(vocab=model.vocab_size), model, pairs)


def test_minimal_pair_validation():
    with pytest.raises(MetricError):
        MinimalPair(prefix="x", grammatical="same", ungrammatical="same")
    with pytest.raises(MetricError):
        MinimalPair(prefix="x", grammatical="", ungrammatical="y")


def test_load_probes(tmp_path):
    p = tmp_path / "probes.jsonl"
    p.write_text(
        '{"prefix": "p", "grammatical": "g", "ungrammatical": "u", "phenomenon": "agr"}\n'
        '{"prefix": "q", "grammatical": "x", "ungrammatical": "y"}\n',
        encoding="utf-8",
    )
    pairs = load_probes(p)
    assert len(pairs) == 2
    assert pairs[0].phenomenon == "agr"
    p.write_text('{"prefix": "p", "grammatical": "g"}\n', encoding="utf-8")
    with pytest.raises(MetricError, match="line 1"):
        load_probes(p)


def test_load_gazetteer(tmp_path):
    p = tmp_path / "gaz.jsonl"
    p.write_text(
        '{"surface": "Vulpea", "lemma": "vulpe"}\n'
        '{"suffix": "ii", "replacement": "e"}\n',
        encoding="utf-8",
    )
    gaz = load_gazetteer(p)
    assert gaz.entries == {"vulpea": "vulpe"}
    assert gaz.suffix_rules == [("ii", "e")]
    p.write_text('{"surface": "x"}\n', encoding="utf-8")
    with pytest.raises(MetricError, match="line 1"):
        load_gazetteer(p)


# -- entity coherence --------------------------------------------------------


def naive_entropy(lemmas):
    counts = Counter(lemmas)
    if len(counts) <= 1:
        return 0.0
    n = sum(counts.values())
    h = 0.0
    for c in counts.values():
        h -= (c / n) * math.log2(c / n)
    return h / math.log2(len(counts))


GAZ = Gazetteer(
    entries={"vulpe": "vulpe", "corb": "corb", "urs": "urs"},
    suffix_rules=[("ii", "e"), ("ul", "")],
)


def test_coherence_balanced_pair():
    assert entity_coherence("vulpe corb vulpe corb", GAZ) == pytest.approx(1.0)


def test_coherence_single_entity_zero():
    assert entity_coherence("vulpe vulpe vulpe", GAZ) == 0.0
    assert entity_coherence("nimic aici", GAZ) == 0.0


def test_coherence_3_1_split():
    value = entity_coherence("vulpe vulpe vulpe corb", GAZ)
    assert value == pytest.approx(0.8112781244591328)
    assert value == pytest.approx(naive_entropy(["vulpe"] * 3 + ["corb"]))


def test_mentions_suffix_fallback_and_case():
    assert find_mentions("Vulpii ursul Corb", GAZ) == ["vulpe", "urs", "corb"]


def test_mentions_longest_match_wins():
    gaz = Gazetteer(entries={"broasca testoasa": "testoasa", "broasca": "broasca"})
    assert find_mentions("broasca testoasa inoata", gaz) == ["testoasa"]
    assert find_mentions("broasca inoata", gaz) == ["broasca"]


def test_suffix_rules_longest_first():
    gaz = Gazetteer(
        entries={"vulpe": "vulpe", "vulpi": "lup"},
        suffix_rules=[("i", ""), ("ii", "e")],
    )
    assert find_mentions("vulpii", gaz) == ["vulpe"]


def test_gazetteer_rejects_empty_lemma():
    with pytest.raises(MetricError, match="non-empty"):
        Gazetteer(entries={"x": ""})


def test_coherence_matches_naive_on_random_mention_lists():
    rng = random.Random(4)
    names = ["vulpe", "corb", "urs"]
    for _ in range(200):
        mentions = [rng.choice(names) for _ in range(rng.randint(0, 20))]
        got = entity_coherence(" ".join(mentions), GAZ)
        assert got == pytest.approx(naive_entropy(mentions), abs=1e-12)
        assert 0.0 <= got <= 1.0


# -- grammar score -----------------------------------------------------------


def test_grammar_score_formula():
    text_100 = " ".join(["cuvant"] * 100)
    assert grammar_score(5, text_100) == pytest.approx(0.95)
    assert grammar_score(0, text_100) == 1.0
    assert grammar_score(120, text_100) == 0.0  # clamped from -0.2
    assert grammar_score(3, "") == 0.0


def test_basic_error_count_rules():
    assert basic_error_count("Vulpea vede vede corbul.") == 1  # doubled word
    assert basic_error_count("ana vine. el pleaca.") == 2  # lowercase starts
    assert basic_error_count('A zis "da. Apoi a plecat.') == 1  # unbalanced quote
    assert basic_error_count("Totul e corect aici.") == 0


# -- distinct-n --------------------------------------------------------------


def naive_distinct(texts, n):
    seen, total = set(), 0
    for t in texts:
        w = t.split()
        for i in range(len(w) - n + 1):
            seen.add(" ".join(w[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def test_distinct_hand_cases():
    assert distinct_n(["a b a"], 1) == pytest.approx(2 / 3)
    assert distinct_n(["a b c", "d e"], 1) == 1.0
    assert distinct_n(["a b", "a b"], 2) == pytest.approx(0.5)
    assert distinct_n(["a"], 2) == 0.0
    with pytest.raises(MetricError):
        distinct_n(["a"], 0)


def test_distinct_matches_naive():
    rng = random.Random(9)
    for _ in range(100):
        texts = [
            " ".join(rng.choice("abcde") for _ in range(rng.randint(0, 12)))
            for _ in range(rng.randint(1, 6))
        ]
        for n in (1, 2, 3):
            assert distinct_n(texts, n) == pytest.approx(naive_distinct(texts, n), abs=1e-12)


# -- self-BLEU ---------------------------------------------------------------


def naive_bleu(hyp_words, ref_word_lists, max_n=4):
    import collections

    log_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_grams = [tuple(hyp_words[i : i + n]) for i in range(len(hyp_words) - n + 1)]
        total = len(hyp_grams)
        hyp_counts = collections.Counter(hyp_grams)
        match = 0
        for g, c in hyp_counts.items():
            best = 0
            for ref in ref_word_lists:
                ref_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
                best = max(best, ref_grams.count(g))
            match += min(c, best)
        p = match / total if match > 0 else 1.0 / (total + 1)
        log_sum += 0.25 * math.log(p)
    c = len(hyp_words)
    if c == 0:
        return 0.0
    r = sorted((abs(len(ref) - c), len(ref)) for ref in ref_word_lists)[0][1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_sum)


def test_self_bleu_identical_texts():
    assert self_bleu(["o vulpe vede un corb lacom"] * 3) == pytest.approx(1.0)


def test_self_bleu_disjoint_vocab_is_small():
    texts = [
        " ".join(f"w{k}_{i}" for i in range(30)) for k in range(3)
    ]
    assert self_bleu(texts) < 0.05


def test_self_bleu_permutation_invariant():
    texts = ["a b c d", "a b e f", "g h a b"]
    assert self_bleu(texts) == pytest.approx(self_bleu(list(reversed(texts))))


def test_self_bleu_needs_two_texts():
    with pytest.raises(MetricError):
        self_bleu(["singur"])


def test_self_bleu_matches_naive():
    rng = random.Random(2)
    for _ in range(30):
        texts = [
            " ".join(rng.choice("abcd") for _ in range(rng.randint(1, 10)))
            for _ in range(rng.randint(2, 5))
        ]
        words = [t.split() for t in texts]
        expected = sum(
            naive_bleu(words[i], words[:i] + words[i + 1 :]) for i in range(len(words))
        ) / len(words)
        assert self_bleu(texts) == pytest.approx(expected, abs=1e-12)


# -- readability -------------------------------------------------------------


def test_syllable_hand_cases():
    assert count_syllables("Ana") == 2
    assert count_syllables("are") == 2
    assert count_syllables("mere") == 2
    assert count_syllables("oaie") == 2  # oa + ie
    assert count_syllables("aer") == 2  # hiatus, not a listed diphthong
    assert count_syllables("brr") == 1  # floor at one


def test_readability_hand_case():
    assert readability("Ana are mere.") == pytest.approx(34.59)


def test_readability_monotone_in_word_length():
    short = readability("Ana are mere.")
    long = readability("Anastasia armonioasa mananca.")
    assert long < short


def test_readability_empty():
    assert readability("") == 0.0


def test_readability_multi_sentence():
    # 6 words, 2 sentences, syllables: 2+2+2+2+2+2 = 12
    text = "Ana are mere. Ana are pere."
    expected = 206.835 - 1.015 * 3.0 - 84.6 * 2.0
    assert readability(text) == pytest.approx(expected)


# -- throughput --------------------------------------------------------------


def test_throughput_median_not_mean(monkeypatch):
    times = iter([0.0, 1.0, 10.0, 11.0, 20.0, 22.0, 30.0, 34.0])
    monkeypatch.setattr(metrics.time, "perf_counter", lambda: next(times))
    ckpt = zero_ckpt(vocab=8)
    rate = throughput(ckpt, prompt_len=2, gen_len=4, batch=1, repeats=3)
    # elapsed per repeat: 1, 2, 4 -> rates 4, 2, 1 -> median 2
    assert rate == pytest.approx(2.0)


def test_throughput_positive():
    assert throughput(zero_ckpt(vocab=8), prompt_len=2, gen_len=3, repeats=1) > 0


# -- fuzz --------------------------------------------------------------------


def random_text(rng):
    alphabet = "abcdeăâîșț .!?\""
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 60)))


def test_bounded_metrics_fuzz():
    rng = random.Random(77)
    for _ in range(1500):
        text = random_text(rng)
        assert 0.0 <= entity_coherence(text, GAZ) <= 1.0
        assert 0.0 <= grammar_score(rng.randint(0, 30), text) <= 1.0
        texts = [random_text(rng) for _ in range(rng.randint(1, 4))]
        assert 0.0 <= distinct_n(texts, rng.randint(1, 4)) <= 1.0
        if len(texts) >= 2:
            assert 0.0 <= self_bleu(texts, max_n=rng.randint(1, 4)) <= 1.0
        assert math.isfinite(readability(text))
