"""Subword tokenizers trained from scratch: BPE merges and Unigram EM.

Both trainers are deterministic for a fixed corpus and configuration: ties in
merge frequency break lexicographically, Viterbi ties break by fewer tokens
then leftmost-longest piece, and all set/dict iterations that influence
output go through explicit sort keys. Word boundaries use a leading "▁"
marker attached to every word; other whitespace collapses to single spaces.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Document

MARKER = "▁"  # ▁ word-boundary sentinel
SPECIAL_PIECES = ("<pad>", "<unk>", "<bos>", "<eos>")
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
MAX_SEED_PIECE_LEN = 16


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentationStats:
    avg_tokens: float
    median_tokens: float
    min_tokens: int
    max_tokens: int


@dataclass
class TokenizerModel:
    """Trained subword model: either BPE merges or Unigram log-probabilities.

    ``vocab`` is the full ordered piece list including the four special
    tokens at ids 0-3. ``merges`` is empty for unigram models. Instances are
    immutable after construction and safe to share across threads.
    """

    kind: str  # "bpe" | "unigram"
    vocab: list[tuple[str, float]]
    merges: list[tuple[str, str]]

    _piece_to_id: dict[str, int] = field(init=False, repr=False)
    _scores: dict[str, float] = field(init=False, repr=False)
    _merge_rank: dict[tuple[str, str], int] = field(init=False, repr=False)
    _max_piece_len: int = field(init=False, repr=False)
    _unk_score: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("bpe", "unigram"):
            raise TokenizerError(f"unknown tokenizer kind: {self.kind!r}")
        if [p for p, _ in self.vocab[:4]] != list(SPECIAL_PIECES):
            raise TokenizerError("vocab must start with the 4 special tokens")
        self._piece_to_id = {p: i for i, (p, _) in enumerate(self.vocab)}
        if len(self._piece_to_id) != len(self.vocab):
            raise TokenizerError("vocab pieces are not unique")
        self._scores = {p: s for p, s in self.vocab[4:]}
        self._merge_rank = {pair: i for i, pair in enumerate(self.merges)}
        self._max_piece_len = max((len(p) for p, _ in self.vocab[4:]), default=1)
        finite = [s for s in self._scores.values() if s != 0.0] or [0.0]
        self._unk_score = min(finite) - 10.0

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def special(self) -> dict[str, int]:
        return {"pad_id": PAD_ID, "unk_id": UNK_ID, "bos_id": BOS_ID, "eos_id": EOS_ID}


def _word_counts(corpus: Iterable[Document]) -> Counter:
    counts: Counter = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        for word in doc.text.split():
            counts[MARKER + word] += 1
    if n_docs == 0 or not counts:
        raise TokenizerError("empty corpus")
    return counts


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------


def train_bpe(corpus: Iterable[Document], target_vocab: int = 32000) -> TokenizerModel:
    """Learn BPE merges by greedy highest-frequency pair merging.

    Merging stops when the vocabulary reaches ``target_vocab`` (special
    tokens included) or no pair occurs at least twice. Frequency ties break
    on the lexicographically smallest (left, right) pair.
    """
    word_counts = _word_counts(corpus)
    words = {w: list(w) for w in word_counts}  # word -> current symbol list
    base_symbols = sorted({sym for syms in words.values() for sym in syms})
    if target_vocab <= 4 + len(base_symbols):
        raise TokenizerError(
            f"target_vocab {target_vocab} too small: need > {4 + len(base_symbols)} "
            f"for {len(base_symbols)} base symbols plus specials"
        )

    def word_pairs(syms: Sequence[str]) -> Counter:
        return Counter(zip(syms[:-1], syms[1:]))

    pair_counts: Counter = Counter()
    pair_words: dict[tuple[str, str], set[str]] = defaultdict(set)
    for w, syms in words.items():
        for pair, k in word_pairs(syms).items():
            pair_counts[pair] += k * word_counts[w]
            pair_words[pair].add(w)

    pieces = list(base_symbols)
    piece_set = set(pieces)
    merges: list[tuple[str, str]] = []
    while 4 + len(pieces) < target_vocab and pair_counts:
        top = max(pair_counts.values())
        if top < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == top)
        merges.append(best)
        merged = best[0] + best[1]
        for w in sorted(pair_words[best]):
            syms = words[w]
            for pair, k in word_pairs(syms).items():
                pair_counts[pair] -= k * word_counts[w]
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                pair_words[pair].discard(w)
            syms = _merge_once(syms, best)
            words[w] = syms
            for pair, k in word_pairs(syms).items():
                pair_counts[pair] += k * word_counts[w]
                pair_words[pair].add(w)
        if merged not in piece_set:
            pieces.append(merged)
            piece_set.add(merged)

    vocab = [(p, 0.0) for p in SPECIAL_PIECES] + [(p, 0.0) for p in pieces]
    return TokenizerModel(kind="bpe", vocab=vocab, merges=merges)


def _merge_once(syms: Sequence[str], pair: tuple[str, str]) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == pair[0] and syms[i + 1] == pair[1]:
            out.append(syms[i] + syms[i + 1])
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def _bpe_segment(model: TokenizerModel, word: str) -> list[str]:
    syms = list(word)
    while len(syms) > 1:
        ranked = [
            (model._merge_rank[pair], pair)
            for pair in set(zip(syms[:-1], syms[1:]))
            if pair in model._merge_rank
        ]
        if not ranked:
            break
        _, pair = min(ranked)
        syms = _merge_once(syms, pair)
    return syms


# ---------------------------------------------------------------------------
# Unigram
# ---------------------------------------------------------------------------


def train_unigram(
    corpus: Iterable[Document],
    target_vocab: int = 32000,
    seed_multiplier: float = 4.0,
    em_iters: int = 2,
    prune_fraction: float = 0.25,
) -> TokenizerModel:
    """Train a unigram piece model by EM over segmentation lattices.

    Seeds with the most frequent substrings (length <= 16, always keeping
    every single character), then alternates EM rounds with pruning rounds
    that drop the ``prune_fraction`` of multi-character pieces whose removal
    costs the least corpus likelihood, until the vocabulary fits
    ``target_vocab`` (specials included).
    """
    if seed_multiplier <= 1:
        raise TokenizerError("seed_multiplier must be > 1")
    if not 0 < prune_fraction < 1:
        raise TokenizerError("prune_fraction must be in (0, 1)")
    if em_iters < 1:
        raise TokenizerError("em_iters must be >= 1")

    word_counts = _word_counts(corpus)
    singles = sorted({c for w in word_counts for c in w})
    target_pieces = target_vocab - 4
    if target_pieces < len(singles):
        raise TokenizerError(
            f"target_vocab {target_vocab} smaller than character inventory "
            f"({len(singles)}) plus specials"
        )

    sub_counts: Counter = Counter()
    for w, cnt in word_counts.items():
        for i in range(len(w)):
            for j in range(i + 1, min(len(w), i + MAX_SEED_PIECE_LEN) + 1):
                sub_counts[w[i:j]] += cnt
    n_seed = max(int(seed_multiplier * target_pieces), len(singles) + 1)
    multis = sorted(
        (p for p in sub_counts if len(p) > 1), key=lambda p: (-sub_counts[p], p)
    )[: max(n_seed - len(singles), 0)]
    probs = {p: float(sub_counts[p]) for p in singles + multis}
    total = sum(probs.values())
    probs = {p: c / total for p, c in probs.items()}

    words = sorted(word_counts)
    while True:
        for _ in range(em_iters):
            probs = _em_step(probs, words, word_counts)
        prunable = sorted(p for p in probs if len(p) > 1)
        excess = len(probs) - target_pieces
        if excess <= 0 or not prunable:
            break
        n_drop = min(max(1, int(prune_fraction * len(prunable))), excess)
        losses = _removal_losses(probs, words, word_counts, prunable)
        for p in sorted(prunable, key=lambda p: (losses[p], p))[:n_drop]:
            del probs[p]
        total = sum(probs.values())
        probs = {p: c / total for p, c in probs.items()}

    pieces = sorted(probs, key=lambda p: (-probs[p], p))
    vocab = [(p, 0.0) for p in SPECIAL_PIECES] + [(p, math.log(probs[p])) for p in pieces]
    return TokenizerModel(kind="unigram", vocab=vocab, merges=[])


def _lattice_forward(word: str, logp: dict[str, float], max_len: int) -> list[float]:
    """log of total segmentation probability for every prefix of ``word``."""
    n = len(word)
    alpha = [float("-inf")] * (n + 1)
    alpha[0] = 0.0
    for j in range(1, n + 1):
        terms = []
        for i in range(max(0, j - max_len), j):
            lp = logp.get(word[i:j])
            if lp is not None and alpha[i] != float("-inf"):
                terms.append(alpha[i] + lp)
        if terms:
            m = max(terms)
            alpha[j] = m + math.log(sum(math.exp(t - m) for t in terms))
    return alpha


def corpus_log_likelihood(probs: dict[str, float], words: Sequence[str], word_counts: Counter) -> float:
    logp = {p: math.log(q) for p, q in probs.items() if q > 0}
    max_len = max(len(p) for p in logp)
    total = 0.0
    for w in words:
        total += word_counts[w] * _lattice_forward(w, logp, max_len)[len(w)]
    return total


def _em_step(probs: dict[str, float], words: Sequence[str], word_counts: Counter) -> dict[str, float]:
    logp = {p: math.log(q) for p, q in probs.items() if q > 0}
    max_len = max(len(p) for p in logp)
    expected: dict[str, float] = defaultdict(float)
    for w in words:
        n = len(w)
        alpha = _lattice_forward(w, logp, max_len)
        beta = [float("-inf")] * (n + 1)
        beta[n] = 0.0
        for i in range(n - 1, -1, -1):
            terms = []
            for j in range(i + 1, min(n, i + max_len) + 1):
                lp = logp.get(w[i:j])
                if lp is not None and beta[j] != float("-inf"):
                    terms.append(lp + beta[j])
            if terms:
                m = max(terms)
                beta[i] = m + math.log(sum(math.exp(t - m) for t in terms))
        log_z = alpha[n]
        cnt = word_counts[w]
        for i in range(n):
            if alpha[i] == float("-inf"):
                continue
            for j in range(i + 1, min(n, i + max_len) + 1):
                piece = w[i:j]
                lp = logp.get(piece)
                if lp is not None and beta[j] != float("-inf"):
                    expected[piece] += cnt * math.exp(alpha[i] + lp + beta[j] - log_z)
    # keep singles alive even when expected mass underflows to zero
    for p in probs:
        if len(p) == 1 and expected[p] <= 0:
            expected[p] = 1e-12
    kept = {p: c for p, c in expected.items() if c > 0 and p in probs}
    total = sum(kept.values())
    return {p: c / total for p, c in kept.items()}


def _removal_losses(
    probs: dict[str, float],
    words: Sequence[str],
    word_counts: Counter,
    prunable: Sequence[str],
) -> dict[str, float]:
    """Exact corpus log-likelihood drop from deleting each candidate piece."""
    logp = {p: math.log(q) for p, q in probs.items() if q > 0}
    max_len = max(len(p) for p in logp)
    base_ll: dict[str, float] = {}
    containing: dict[str, list[str]] = defaultdict(list)
    prunable_set = set(prunable)
    for w in words:
        base_ll[w] = _lattice_forward(w, logp, max_len)[len(w)]
        seen = set()
        for i in range(len(w)):
            for j in range(i + 2, min(len(w), i + max_len) + 1):
                piece = w[i:j]
                if piece in prunable_set and piece not in seen:
                    seen.add(piece)
                    containing[piece].append(w)
    losses: dict[str, float] = {}
    for piece in prunable:
        reduced = dict(logp)
        del reduced[piece]
        loss = 0.0
        for w in containing[piece]:
            loss += word_counts[w] * (base_ll[w] - _lattice_forward(w, reduced, max_len)[len(w)])
        losses[piece] = loss
    return losses


def _viterbi_segment(model: TokenizerModel, word: str) -> list[str | None]:
    """Best segmentation of ``word``; None entries stand for unknown spans.

    Ties break by fewer tokens, then by the leftmost-longest piece (applied
    recursively via a right-to-left sweep).
    """
    scores = model._scores
    max_len = model._max_piece_len
    n = len(word)
    # best[i]: (score, -ntokens) for the suffix starting at i
    best: list[tuple[float, int]] = [(float("-inf"), 0)] * (n + 1)
    best[n] = (0.0, 0)
    choice: list[tuple[int, bool]] = [(0, False)] * n
    for i in range(n - 1, -1, -1):
        top = None
        for j in range(i + 1, min(n, i + max_len) + 1):
            s = scores.get(word[i:j])
            if s is None or best[j][0] == float("-inf"):
                continue
            cand = (s + best[j][0], best[j][1] - 1, j - i)
            if top is None or cand > top:
                top = cand
                choice[i] = (j, False)
        if top is None:
            # unknown character: single-char unk edge
            top = (model._unk_score + best[i + 1][0], best[i + 1][1] - 1, 1)
            choice[i] = (i + 1, True)
        best[i] = (top[0], top[1])
    out: list[str | None] = []
    i = 0
    while i < n:
        j, is_unk = choice[i]
        out.append(None if is_unk else word[i:j])
        i = j
    return out


# ---------------------------------------------------------------------------
# Shared surface
# ---------------------------------------------------------------------------


def encode(model: TokenizerModel, text: str, add_bos_eos: bool = False) -> list[int]:
    """Deterministically segment ``text`` into token ids.

    BPE applies merges in training order, greedily; Unigram takes the
    Viterbi best path. Characters outside the vocabulary map to unk.
    """
    ids: list[int] = []
    if add_bos_eos:
        ids.append(BOS_ID)
    for word in text.split():
        marked = MARKER + word
        if model.kind == "bpe":
            pieces: list[str | None] = list(_bpe_segment(model, marked))
        else:
            pieces = _viterbi_segment(model, marked)
        for piece in pieces:
            if piece is None:
                ids.append(UNK_ID)
            else:
                ids.append(model._piece_to_id.get(piece, UNK_ID))
    if add_bos_eos:
        ids.append(EOS_ID)
    return ids


def decode(model: TokenizerModel, ids: Sequence[int]) -> str:
    """Invert :func:`encode`: concatenate pieces, restore word boundaries."""
    pieces = []
    for i in ids:
        if not 0 <= i < model.vocab_size:
            raise TokenizerError(f"token id {i} out of range (vocab size {model.vocab_size})")
        if i < 4:
            continue
        pieces.append(model.vocab[i][0])
    text = "".join(pieces).replace(MARKER, " ")
    return text[1:] if text.startswith(" ") else text


def segmentation_stats(model: TokenizerModel, corpus: Iterable[Document]) -> SegmentationStats:
    counts = [len(encode(model, doc.text)) for doc in corpus]
    if not counts:
        raise TokenizerError("empty corpus")
    return SegmentationStats(
        avg_tokens=statistics.fmean(counts),
        median_tokens=float(statistics.median(counts)),
        min_tokens=min(counts),
        max_tokens=max(counts),
    )


def save_tokenizer(model: TokenizerModel, path: str | Path) -> None:
    obj = {
        "version": 1,
        "kind": model.kind,
        "pieces": [{"piece": p, "score": s} for p, s in model.vocab],
        "merges": [[l, r] for l, r in model.merges],
        "special": model.special,
    }
    Path(path).write_text(json.dumps(obj, ensure_ascii=False), encoding="utf-8")


def load_tokenizer(path: str | Path) -> TokenizerModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("version") != 1:
        raise TokenizerError(f"unsupported tokenizer file version: {obj.get('version')}")
    vocab = [(entry["piece"], float(entry["score"])) for entry in obj["pieces"]]
    merges = [(l, r) for l, r in obj["merges"]]
    return TokenizerModel(kind=obj["kind"], vocab=vocab, merges=merges)
