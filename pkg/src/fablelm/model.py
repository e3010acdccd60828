"""Decoder-only transformer in float32: forward, loss, gradients, sampling.

Pre-norm blocks with RMS normalization (eps 1e-5, learned gain), causal
multi-head attention with rotary position embeddings applied to q/k in the
split-half convention, and a SiLU-gated MLP. Checkpoints are plain named
tensor maps so pruning masks and quantization can treat them uniformly; the
optimizer in train.py updates these maps directly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

NORM_EPS = 1e-5
CKPT_MAGIC = b"TF3C"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int
    hidden: int
    n_heads: int
    head_dim: int
    mlp_dim: int
    max_seq: int = 2048
    tie_embeddings: bool = False
    rope_theta: float = 10000.0

    def __post_init__(self):
        counts = (self.vocab_size, self.n_layers, self.hidden, self.n_heads,
                  self.head_dim, self.mlp_dim, self.max_seq)
        if any(c < 1 for c in counts):
            raise ModelError(f"all config counts must be >= 1, got {self}")
        if self.n_heads * self.head_dim != self.hidden:
            raise ModelError(
                f"n_heads*head_dim must equal hidden: "
                f"{self.n_heads}*{self.head_dim} != {self.hidden}"
            )


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, torch.Tensor]


@dataclass(frozen=True)
class ForwardMasks:
    """Binary unit masks; 0 disables an MLP neuron / attention head."""

    mlp_mask: torch.Tensor  # [n_layers, mlp_dim]
    head_mask: torch.Tensor  # [n_layers, n_heads]


def full_masks(config: ModelConfig) -> ForwardMasks:
    return ForwardMasks(
        mlp_mask=torch.ones(config.n_layers, config.mlp_dim),
        head_mask=torch.ones(config.n_layers, config.n_heads),
    )


def param_count(config: ModelConfig) -> int:
    """Exact number of scalar parameters for a config, in closed form."""
    n_embed = config.vocab_size * config.hidden
    if not config.tie_embeddings:
        n_embed *= 2
    per_layer = (
        4 * config.hidden * config.hidden
        + 3 * config.hidden * config.mlp_dim
        + 2 * config.hidden
    )
    return n_embed + config.n_layers * per_layer + config.hidden


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (config.vocab_size, config.hidden)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm.weight"] = (config.hidden,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.{proj}.weight"] = (config.hidden, config.hidden)
        shapes[f"{p}.mlp_norm.weight"] = (config.hidden,)
        shapes[f"{p}.gate.weight"] = (config.mlp_dim, config.hidden)
        shapes[f"{p}.up.weight"] = (config.mlp_dim, config.hidden)
        shapes[f"{p}.down.weight"] = (config.hidden, config.mlp_dim)
    shapes["final_norm.weight"] = (config.hidden,)
    if not config.tie_embeddings:
        shapes["lm_head.weight"] = (config.vocab_size, config.hidden)
    return shapes


def init_checkpoint(config: ModelConfig, seed: int = 0) -> Checkpoint:
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("norm.weight"):
            tensors[name] = torch.ones(shape)
        else:
            tensors[name] = torch.empty(shape).normal_(0.0, 0.02, generator=gen)
    return Checkpoint(config=config, tensors=tensors)


def validate_checkpoint(ckpt: Checkpoint) -> None:
    expected = tensor_shapes(ckpt.config)
    if set(ckpt.tensors) != set(expected):
        missing = set(expected) - set(ckpt.tensors)
        extra = set(ckpt.tensors) - set(expected)
        raise ModelError(f"tensor names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        t = ckpt.tensors[name]
        if tuple(t.shape) != shape:
            raise ModelError(f"{name}: shape {tuple(t.shape)} != expected {shape}")
        if not torch.isfinite(t).all():
            raise ModelError(f"{name}: non-finite values")
    stored = sum(t.numel() for t in ckpt.tensors.values())
    if stored != param_count(ckpt.config):
        raise ModelError(f"stored params {stored} != param_count {param_count(ckpt.config)}")


def _rms_norm(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + NORM_EPS) * gain


def _rope_tables(config: ModelConfig, t_len: int, dtype=torch.float32):
    half = config.head_dim // 2
    inv_freq = config.rope_theta ** (
        -torch.arange(0, half, dtype=dtype) * 2.0 / config.head_dim
    )
    angles = torch.arange(t_len, dtype=dtype)[:, None] * inv_freq[None, :]
    return angles.cos(), angles.sin()  # each [T, head_dim//2]


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, T, D]; rotate (x1, x2) pairs split at D/2
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    return torch.cat([x1 * c - x2 * s, x1 * s + x2 * c], dim=-1)


def _as_ids(ids) -> torch.Tensor:
    t = torch.as_tensor(ids, dtype=torch.long)
    if t.dim() == 1:
        t = t[None, :]
    if t.dim() != 2:
        raise ModelError(f"ids must be [B,T] or [T], got shape {tuple(t.shape)}")
    return t


def forward(ckpt: Checkpoint, ids, masks: ForwardMasks | None = None) -> torch.Tensor:
    """Logits [B, T, vocab] for token ids [B, T] (or [T], auto-batched)."""
    cfg = ckpt.config
    w = ckpt.tensors
    ids = _as_ids(ids)
    b, t = ids.shape
    if t > cfg.max_seq:
        raise ModelError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ModelError("token id out of range")
    if masks is not None:
        if masks.mlp_mask.shape != (cfg.n_layers, cfg.mlp_dim) or masks.head_mask.shape != (
            cfg.n_layers,
            cfg.n_heads,
        ):
            raise ModelError("mask shapes do not match config")

    x = w["embed.weight"][ids]
    cos, sin = _rope_tables(cfg, t)
    causal = torch.full((t, t), float("-inf")).triu(diagonal=1)
    scale = 1.0 / math.sqrt(cfg.head_dim)

    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h = _rms_norm(x, w[f"{p}.attn_norm.weight"])
        q = (h @ w[f"{p}.q.weight"].T).view(b, t, cfg.n_heads, cfg.head_dim).transpose(1, 2)
        k = (h @ w[f"{p}.k.weight"].T).view(b, t, cfg.n_heads, cfg.head_dim).transpose(1, 2)
        v = (h @ w[f"{p}.v.weight"].T).view(b, t, cfg.n_heads, cfg.head_dim).transpose(1, 2)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        scores = q @ k.transpose(-2, -1) * scale + causal
        attn = scores.softmax(dim=-1)
        ctx = attn @ v  # [B, H, T, D]
        if masks is not None:
            ctx = ctx * masks.head_mask[i][None, :, None, None]
        ctx = ctx.transpose(1, 2).reshape(b, t, cfg.hidden)
        x = x + ctx @ w[f"{p}.o.weight"].T

        h = _rms_norm(x, w[f"{p}.mlp_norm.weight"])
        inter = F.silu(h @ w[f"{p}.gate.weight"].T) * (h @ w[f"{p}.up.weight"].T)
        if masks is not None:
            inter = inter * masks.mlp_mask[i][None, None, :]
        x = x + inter @ w[f"{p}.down.weight"].T

    h = _rms_norm(x, w["final_norm.weight"])
    out_w = w["embed.weight"] if cfg.tie_embeddings else w["lm_head.weight"]
    return h @ out_w.T


def ce_loss(logits: torch.Tensor, labels, ignore_id: int | None = None) -> torch.Tensor:
    """Mean next-token cross-entropy in nats; the shift happens here.

    Position t is scored against labels[t+1]; target positions whose label
    equals ignore_id are excluded from the mean.
    """
    labels = _as_ids(labels)
    if logits.dim() == 2:
        logits = logits[None]
    if logits.shape[:2] != labels.shape:
        raise ModelError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    if labels.shape[1] < 2:
        raise ModelError("need at least 2 positions for next-token loss")
    pred = logits[:, :-1].reshape(-1, logits.shape[-1])
    tgt = labels[:, 1:].reshape(-1)
    if ignore_id is not None:
        keep = tgt != ignore_id
        if not keep.any():
            raise ModelError("all positions ignored")
        pred, tgt = pred[keep], tgt[keep]
    logp = F.log_softmax(pred, dim=-1)
    return -logp.gather(1, tgt[:, None]).mean()


def loss_and_grads(
    ckpt: Checkpoint,
    ids,
    masks: ForwardMasks | None = None,
    ignore_id: int | None = None,
) -> tuple[float, dict[str, torch.Tensor]]:
    """ce_loss(forward(ids), labels=ids) and its gradient w.r.t. every tensor."""
    params = {n: t.detach().clone().requires_grad_(True) for n, t in ckpt.tensors.items()}
    live = Checkpoint(config=ckpt.config, tensors=params)
    loss = ce_loss(forward(live, ids, masks), ids, ignore_id)
    if not torch.isfinite(loss):
        raise ModelError(f"non-finite loss: {loss.item()}")
    loss.backward()
    grads = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in params.items()
    }
    return loss.item(), grads


def backward(
    ckpt: Checkpoint,
    ids,
    masks: ForwardMasks | None = None,
    ignore_id: int | None = None,
) -> dict[str, torch.Tensor]:
    """Gradient of ce_loss(forward(ids), labels=ids) w.r.t. every tensor."""
    return loss_and_grads(ckpt, ids, masks, ignore_id)[1]


def generate(
    ckpt: Checkpoint,
    prompt_ids: Sequence[int],
    max_new: int,
    temperature: float = 1.0,
    top_k: int | None = None,
    seed: int = 0,
    eos_id: int | None = 3,
    masks: ForwardMasks | None = None,
) -> list[int]:
    """Sample up to max_new tokens after the prompt; stops at eos_id.

    temperature 0 (or top_k 1) is argmax and needs no randomness; otherwise
    draws come from a generator seeded once at entry, so equal seeds give
    equal outputs.
    """
    cfg = ckpt.config
    if temperature < 0:
        raise ModelError("temperature must be >= 0")
    if top_k is not None and top_k < 1:
        raise ModelError("top_k must be >= 1")
    ids = list(prompt_ids)
    if not ids:
        raise ModelError("prompt must be non-empty")
    if len(ids) > cfg.max_seq:
        raise ModelError(f"prompt length {len(ids)} exceeds max_seq {cfg.max_seq}")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _ in range(max_new):
            window = ids[-cfg.max_seq:]
            logits = forward(ckpt, window, masks)[0, -1]
            if temperature == 0 or top_k == 1:
                nxt = int(logits.argmax())
            else:
                scaled = logits / temperature
                if top_k is not None and top_k < scaled.numel():
                    kth = scaled.topk(top_k).values[-1]
                    scaled = scaled.masked_fill(scaled < kth, float("-inf"))
                probs = scaled.softmax(dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=gen))
            ids.append(nxt)
            if eos_id is not None and nxt == eos_id:
                break
    return ids


# ---------------------------------------------------------------------------
# Serialization (little-endian)
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    validate_checkpoint(ckpt)
    cfg = ckpt.config
    parts = [
        CKPT_MAGIC,
        struct.pack(
            "<IIIIIIII",
            CKPT_VERSION,
            cfg.vocab_size,
            cfg.n_layers,
            cfg.hidden,
            cfg.n_heads,
            cfg.head_dim,
            cfg.mlp_dim,
            cfg.max_seq,
        ),
        struct.pack("<Bf", int(cfg.tie_embeddings), cfg.rope_theta),
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().to(torch.float32).contiguous()
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(buf):
            raise ModelError(f"{path}: truncated checkpoint file")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise ModelError(f"{path}: bad magic, not a checkpoint file")
    version, vocab, layers, hidden, heads, head_dim, mlp, max_seq = struct.unpack(
        "<IIIIIIII", take(32)
    )
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    tie, theta = struct.unpack("<Bf", take(5))
    config = ModelConfig(
        vocab_size=vocab,
        n_layers=layers,
        hidden=hidden,
        n_heads=heads,
        head_dim=head_dim,
        mlp_dim=mlp,
        max_seq=max_seq,
        tie_embeddings=bool(tie),
        rope_theta=float(theta),
    )
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        numel = math.prod(dims)
        payload = take(4 * numel)
        tensors[name] = (
            torch.frombuffer(bytearray(payload), dtype=torch.float32).reshape(dims).clone()
        )
    if off != len(buf):
        raise ModelError(f"{path}: {len(buf) - off} trailing bytes")
    ckpt = Checkpoint(config=config, tensors=tensors)
    validate_checkpoint(ckpt)
    return ckpt
