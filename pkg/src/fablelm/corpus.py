"""Corpus ingestion: light normalization and document streams.

Normalization is deliberately conservative: line breaks are standardized and
trailing whitespace removed, but bytes are otherwise passed through unchanged
(no Unicode normalization form is applied), so diacritics survive intact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

MAX_DOC_BYTES = 10 * 1024 * 1024


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: int
    text: str


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    char_count: int
    mean_chars_per_doc: float


def normalize(raw: str) -> str:
    """Standardize line breaks to LF and strip trailing whitespace.

    Strips trailing whitespace on every line and at the document end; returns
    the empty string iff the input is whitespace-only. All other bytes,
    diacritics included, are left untouched.
    """
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    lines = [line.rstrip() for line in text.split("\n")]
    return "\n".join(lines).rstrip("\n")


def load_corpus(path: str | Path, format: str = "lines") -> list[Document]:
    """Load a corpus file as a list of normalized documents.

    ``lines``: one document per non-empty line. ``jsonl``: one document per
    record's "text" field. Order is preserved and ids are assigned
    sequentially from 0. Raises :class:`CorpusError` if the file yields no
    documents after filtering.
    """
    path = Path(path)
    if format not in ("lines", "jsonl"):
        raise CorpusError(f"unknown corpus format: {format!r} (expected 'lines' or 'jsonl')")
    try:
        raw = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not valid UTF-8 ({exc})") from exc

    texts: list[str] = []
    if format == "lines":
        for line in normalize(raw).split("\n"):
            if line:
                texts.append(line)
    else:
        for lineno, line in enumerate(raw.split("\n"), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
            if not isinstance(record, dict) or not isinstance(record.get("text"), str):
                raise CorpusError(f"{path}: line {lineno} has no string 'text' field")
            text = normalize(record["text"])
            if text:
                texts.append(text)

    if not texts:
        raise CorpusError(f"{path}: corpus is empty after filtering")
    for text in texts:
        if len(text.encode("utf-8")) > MAX_DOC_BYTES:
            raise CorpusError(f"{path}: document exceeds {MAX_DOC_BYTES} bytes")
    return [Document(id=i, text=t) for i, t in enumerate(texts)]


def corpus_stats(docs: Iterable[Document]) -> CorpusStats:
    docs = list(docs)
    chars = sum(len(d.text) for d in docs)
    mean = chars / len(docs) if docs else 0.0
    return CorpusStats(doc_count=len(docs), char_count=chars, mean_chars_per_doc=mean)
