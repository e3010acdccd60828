"""Evaluation metrics: CE/PPL, agreement probes, entity coherence, grammar
score, Distinct-n, Self-BLEU, readability, and generation throughput.

Everything here is a pure function over immutable inputs. Perplexity is
always exp() of the exact CE value reported next to it, never recomputed
through a different accumulation order.
"""

from __future__ import annotations

import json
import math
import re
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .model import Checkpoint, ForwardMasks, ce_loss, forward, generate
from .tokenizer import BOS_ID, TokenizerModel, encode

VOWELS = set("aăâeiîou")
DIPHTHONGS = {"ea", "ia", "ie", "io", "iu", "oa", "ua", "uă"}
_WORD_RE = re.compile(r"\w+", re.UNICODE)
_SENT_SPLIT_RE = re.compile(r"[.!?]+")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MinimalPair:
    prefix: str
    grammatical: str
    ungrammatical: str
    phenomenon: str = ""

    def __post_init__(self):
        if not self.grammatical or not self.ungrammatical:
            raise MetricError("continuations must be non-empty")
        if self.grammatical == self.ungrammatical:
            raise MetricError("grammatical and ungrammatical continuations are identical")


@dataclass
class Gazetteer:
    """Entity surface forms with lemmas, plus suffix rewrites as fallback.

    Suffix rules are kept longest-suffix-first so the most specific rewrite
    wins; a word is a mention if its surface (or its rewritten form) is known.
    """

    entries: dict[str, str]
    suffix_rules: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if any(not lemma for lemma in self.entries.values()):
            raise MetricError("gazetteer lemmas must be non-empty")
        self.entries = {s.lower(): l for s, l in self.entries.items()}
        self.suffix_rules = sorted(self.suffix_rules, key=lambda r: -len(r[0]))
        self._lemmas = set(self.entries.values())
        self._max_words = max((len(s.split()) for s in self.entries), default=1)

    def lemma_for(self, word: str) -> str | None:
        hit = self.entries.get(word)
        if hit is not None:
            return hit
        for suffix, repl in self.suffix_rules:
            if word.endswith(suffix) and len(word) > len(suffix):
                candidate = word[: -len(suffix)] + repl
                if candidate in self.entries:
                    return self.entries[candidate]
                if candidate in self._lemmas:
                    return candidate
        return None


@dataclass
class EvalReport:
    ce: float
    ppl: float
    agreement_acc: float
    coherence: float
    grammar_score: float
    distinct_n: dict[int, float]
    self_bleu: float
    readability: float
    tokens_per_sec: float


# ---------------------------------------------------------------------------
# Model-side metrics
# ---------------------------------------------------------------------------


def intrinsic(
    ckpt: Checkpoint,
    blocks,
    masks: ForwardMasks | None = None,
    micro_batch: int = 8,
) -> tuple[float, float]:
    """Position-weighted mean next-token CE over blocks, and exp(ce)."""
    ids = torch.as_tensor(blocks, dtype=torch.long)
    if ids.dim() == 1:
        ids = ids[None]
    if ids.numel() == 0:
        raise MetricError("no blocks to evaluate")
    total, positions = 0.0, 0
    with torch.no_grad():
        for start in range(0, ids.shape[0], micro_batch):
            chunk = ids[start : start + micro_batch]
            loss = ce_loss(forward(ckpt, chunk, masks), chunk)
            n = chunk.shape[0] * (chunk.shape[1] - 1)
            total += loss.item() * n
            positions += n
    ce = total / positions
    return ce, math.exp(ce)


def _continuation_logprob(
    ckpt: Checkpoint, model: TokenizerModel, prefix_ids: list[int], cont_ids: list[int]
) -> float:
    ids = prefix_ids + cont_ids
    with torch.no_grad():
        logp = torch.log_softmax(forward(ckpt, ids)[0], dim=-1)
    start = len(prefix_ids)
    return sum(logp[t - 1, ids[t]].item() for t in range(start, len(ids)))


def agreement(ckpt: Checkpoint, model: TokenizerModel, pairs: Sequence[MinimalPair]) -> float:
    """Fraction of pairs where the grammatical continuation is strictly more
    likely (summed continuation log-probability, not length-normalized);
    exact ties count as incorrect."""
    if not pairs:
        raise MetricError("no pairs to evaluate")
    correct = 0
    for pair in pairs:
        prefix_ids = [BOS_ID] + encode(model, pair.prefix)
        good = encode(model, pair.grammatical)
        bad = encode(model, pair.ungrammatical)
        if not good or not bad:
            raise MetricError(f"continuation tokenizes to empty: {pair!r}")
        g = _continuation_logprob(ckpt, model, prefix_ids, good)
        u = _continuation_logprob(ckpt, model, prefix_ids, bad)
        if g > u:
            correct += 1
    return correct / len(pairs)


def load_probes(path: str | Path) -> list[MinimalPair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            pairs.append(
                MinimalPair(
                    prefix=rec["prefix"],
                    grammatical=rec["grammatical"],
                    ungrammatical=rec["ungrammatical"],
                    phenomenon=rec.get("phenomenon", ""),
                )
            )
        except KeyError as exc:
            raise MetricError(f"{path}: line {lineno} missing field {exc}") from exc
    return pairs


def load_gazetteer(path: str | Path) -> Gazetteer:
    """JSONL mixing {surface, lemma} entries and {suffix, replacement} rules."""
    entries: dict[str, str] = {}
    rules: list[tuple[str, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "surface" in rec and "lemma" in rec:
            entries[rec["surface"]] = rec["lemma"]
        elif "suffix" in rec and "replacement" in rec:
            rules.append((rec["suffix"], rec["replacement"]))
        else:
            raise MetricError(
                f"{path}: line {lineno} needs surface/lemma or suffix/replacement"
            )
    return Gazetteer(entries=entries, suffix_rules=rules)


# ---------------------------------------------------------------------------
# Text-side metrics
# ---------------------------------------------------------------------------


def find_mentions(text: str, gaz: Gazetteer) -> list[str]:
    """Entity lemmas in order of appearance; longest surface match wins."""
    words = _WORD_RE.findall(text.lower())
    lemmas: list[str] = []
    i = 0
    while i < len(words):
        matched = False
        for width in range(min(gaz._max_words, len(words) - i), 0, -1):
            surface = " ".join(words[i : i + width])
            if surface in gaz.entries:
                lemmas.append(gaz.entries[surface])
                i += width
                matched = True
                break
        if not matched:
            lemma = gaz.lemma_for(words[i])
            if lemma is not None:
                lemmas.append(lemma)
            i += 1
    return lemmas


def entity_coherence(text: str, gaz: Gazetteer) -> float:
    """Normalized entropy of entity-lemma frequencies: 1 = balanced cast,
    0 = a single entity (or none at all)."""
    counts = Counter(find_mentions(text, gaz))
    if len(counts) <= 1:
        return 0.0
    total = sum(counts.values())
    h = -sum((c / total) * math.log2(c / total) for c in counts.values())
    return h / math.log2(len(counts))


def grammar_score(error_count: int, text: str) -> float:
    words = len(text.split())
    if words == 0:
        return 0.0
    return min(1.0, max(0.0, 1.0 - error_count / words))


def basic_error_count(text: str) -> int:
    """Minimal built-in checker: doubled words, sentence-initial lowercase,
    unbalanced double quotes. Any callable(text)->int can replace it."""
    errors = 0
    words = text.split()
    for a, b in zip(words, words[1:]):
        if a.lower() == b.lower():
            errors += 1
    for sentence in _SENT_SPLIT_RE.split(text):
        stripped = sentence.strip()
        if stripped and stripped[0].isalpha() and stripped[0].islower():
            errors += 1
    if (text.count('"') + text.count("„") + text.count("”")) % 2:
        errors += 1
    return errors


def _ngrams(words: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(words[i : i + n]) for i in range(len(words) - n + 1)]


def distinct_n(texts: Sequence[str], n: int) -> float:
    if n < 1:
        raise MetricError("n must be >= 1")
    grams: list[tuple[str, ...]] = []
    for text in texts:
        grams.extend(_ngrams(text.split(), n))
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


def _bleu(hyp: list[str], refs: list[list[str]], max_n: int) -> float:
    log_p_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_counts = Counter(_ngrams(hyp, n))
        total = sum(hyp_counts.values())
        clipped = 0
        for gram, cnt in hyp_counts.items():
            best = max((Counter(_ngrams(r, n))[gram] for r in refs), default=0)
            clipped += min(cnt, best)
        # +1 smoothing on the counts whenever there are zero matches
        p = clipped / total if clipped > 0 else 1.0 / (total + 1)
        log_p_sum += math.log(p) / max_n
    c = len(hyp)
    if c == 0:
        return 0.0
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p_sum)


def self_bleu(texts: Sequence[str], max_n: int = 4) -> float:
    """Mean BLEU of each text against all the others; high = low diversity."""
    if len(texts) < 2:
        raise MetricError("need at least 2 texts")
    tokenized = [t.split() for t in texts]
    scores = []
    for i, hyp in enumerate(tokenized):
        refs = tokenized[:i] + tokenized[i + 1 :]
        scores.append(_bleu(hyp, refs, max_n))
    return sum(scores) / len(scores)


def count_syllables(word: str) -> int:
    """Nucleus count: every vowel starts one, but a listed diphthong pair is
    consumed whole as a single nucleus (greedy, left to right). Vowel-less
    words still count as one syllable."""
    word = word.lower()
    nuclei = 0
    i = 0
    while i < len(word):
        if word[i] in VOWELS:
            nuclei += 1
            i += 2 if word[i : i + 2] in DIPHTHONGS else 1
        else:
            i += 1
    return max(nuclei, 1)


def readability(text: str) -> float:
    """Flesch reading-ease with a Romanian syllable counter; empty text -> 0."""
    words = text.split()
    if not words:
        return 0.0
    sentences = sum(1 for s in _SENT_SPLIT_RE.split(text) if s.strip())
    sentences = max(sentences, 1)
    syllables = sum(count_syllables(w) for w in words)
    return 206.835 - 1.015 * (len(words) / sentences) - 84.6 * (syllables / len(words))


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------


def throughput(
    ckpt: Checkpoint,
    prompt_len: int,
    gen_len: int,
    batch: int = 1,
    repeats: int = 3,
) -> float:
    """Median greedy-decoding rate in tokens/sec, after one untimed warmup."""
    if repeats < 1:
        raise MetricError("repeats must be >= 1")
    vocab = ckpt.config.vocab_size
    prompts = [
        [(i * 7 + j * 3 + 1) % vocab for j in range(prompt_len)] for i in range(batch)
    ]

    def run() -> float:
        t0 = time.perf_counter()
        for prompt in prompts:
            generate(ckpt, prompt, max_new=gen_len, temperature=0.0, eos_id=None)
        return time.perf_counter() - t0

    run()  # warmup
    rates = [(batch * gen_len) / run() for _ in range(repeats)]
    return statistics.median(rates)
