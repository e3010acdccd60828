"""Fixed-length training blocks cut from one concatenated token stream.

Documents are encoded in corpus order with a bos token in front of each one,
so blocks freely cross document boundaries and carry no padding; the trailing
remainder shorter than one block is dropped. Labels are the inputs themselves
(the next-token shift happens inside the loss), so nothing extra is stored.

On-disk layout (little-endian): magic "TF3P", version u32=1, block_len u32,
vocab_size u32, block_count u64, then block_count*block_len token ids as u32.
Loading memory-maps the payload; block i is a constant-time slice.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Document
from .tokenizer import BOS_ID, TokenizerModel, encode

PACK_MAGIC = b"TF3P"
PACK_VERSION = 1
HEADER = struct.Struct("<4sIIIQ")  # magic, version, block_len, vocab_size, count


class PackingError(ValueError):
    pass


@dataclass
class PackedDataset:
    block_len: int
    vocab_size: int
    tokens: np.ndarray  # [n_blocks, block_len] uint32, possibly memory-mapped

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[1] != self.block_len:
            raise PackingError(
                f"token array {self.tokens.shape} does not match block_len {self.block_len}"
            )
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise PackingError("token id out of vocab range")

    @property
    def n_blocks(self) -> int:
        return self.tokens.shape[0]

    def block(self, i: int) -> np.ndarray:
        return self.tokens[i]


def pack(model: TokenizerModel, corpus: Iterable[Document], block_len: int = 2048) -> PackedDataset:
    """Encode documents, join into one stream, cut floor(len/L) blocks."""
    if block_len < 2:
        raise PackingError(f"block_len must be >= 2, got {block_len}")
    stream: list[int] = []
    for doc in corpus:
        stream.append(BOS_ID)
        stream.extend(encode(model, doc.text))
    n_blocks = len(stream) // block_len
    if n_blocks == 0:
        raise PackingError(
            f"corpus yields {len(stream)} tokens, fewer than one block of {block_len}"
        )
    tokens = np.asarray(stream[: n_blocks * block_len], dtype=np.uint32).reshape(
        n_blocks, block_len
    )
    return PackedDataset(block_len=block_len, vocab_size=model.vocab_size, tokens=tokens)


def save_packed(dataset: PackedDataset, path: str | Path) -> None:
    header = HEADER.pack(
        PACK_MAGIC, PACK_VERSION, dataset.block_len, dataset.vocab_size, dataset.n_blocks
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(dataset.tokens.astype("<u4", copy=False).tobytes())


def load_packed(path: str | Path) -> PackedDataset:
    """Open a packed file with the payload memory-mapped, not copied."""
    path = Path(path)
    size = path.stat().st_size
    if size < HEADER.size:
        raise PackingError(f"{path}: file too small for header")
    with open(path, "rb") as f:
        magic, version, block_len, vocab_size, count = HEADER.unpack(f.read(HEADER.size))
    if magic != PACK_MAGIC:
        raise PackingError(f"{path}: bad magic, not a packed dataset")
    if version != PACK_VERSION:
        raise PackingError(f"{path}: unsupported version {version}")
    expected = HEADER.size + 4 * count * block_len
    if size != expected:
        raise PackingError(f"{path}: size {size} != expected {expected} (truncated or padded)")
    tokens = np.memmap(path, dtype="<u4", mode="r", offset=HEADER.size, shape=(count, block_len))
    return PackedDataset(block_len=block_len, vocab_size=vocab_size, tokens=tokens)


def split_held_out(dataset: PackedDataset, fraction: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Train/eval split: the last max(1, floor(fraction*n)) blocks are eval."""
    n = dataset.n_blocks
    if n < 2:
        raise PackingError(f"need >= 2 blocks to split, have {n}")
    n_eval = max(1, int(fraction * n))
    return dataset.tokens[: n - n_eval], dataset.tokens[n - n_eval :]
