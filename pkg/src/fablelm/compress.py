"""Model compression: structured pruning masks, a pruning-grid sweep,
logit distillation into a smaller student, and Q8/Q6 weight quantization.

Pruning never rewrites weights; it builds binary masks the forward pass
multiplies in, so a sweep can probe many configurations against one frozen
checkpoint. Distillation reuses the pretraining loop with a KL+CE objective
against a frozen teacher. Quantization is symmetric per-tensor with
round-to-nearest-even; norm gains stay in float32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .metrics import intrinsic
from .model import (
    Checkpoint,
    ForwardMasks,
    ModelConfig,
    ce_loss,
    forward,
    full_masks,
)
from .train import TrainConfig, pretrain

QMAX = {8: 127, 6: 31}
QUANT_MAGIC = b"TF3Q"
QUANT_VERSION = 1


class CompressError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Structured pruning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PruneConfig:
    mlp_rate: float
    head_rate: float
    selection: str = "magnitude"  # or "random"
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.mlp_rate <= 1 and 0 <= self.head_rate <= 1):
            raise CompressError(f"rates must lie in [0,1]: {self.mlp_rate}, {self.head_rate}")
        if self.selection not in ("magnitude", "random"):
            raise CompressError(f"unknown selection: {self.selection!r}")


def _neuron_scores(ckpt: Checkpoint, layer: int) -> torch.Tensor:
    """L2 norm of each MLP neuron's in and out weights (gate+up rows, down col)."""
    w = ckpt.tensors
    p = f"layers.{layer}"
    stacked = torch.cat(
        [w[f"{p}.gate.weight"], w[f"{p}.up.weight"], w[f"{p}.down.weight"].T], dim=1
    )
    return stacked.norm(dim=1)


def _head_scores(ckpt: Checkpoint, layer: int) -> torch.Tensor:
    """L2 norm of each head's output-projection column block."""
    cfg = ckpt.config
    o = ckpt.tensors[f"layers.{layer}.o.weight"]  # [hidden, hidden]
    blocks = o.view(cfg.hidden, cfg.n_heads, cfg.head_dim)
    return blocks.permute(1, 0, 2).reshape(cfg.n_heads, -1).norm(dim=1)


def _smallest(scores: torch.Tensor, n_drop: int) -> list[int]:
    # ascending by (score, index): equal scores drop the lower index first
    order = sorted(range(scores.numel()), key=lambda i: (scores[i].item(), i))
    return order[:n_drop]


def build_masks(ckpt: Checkpoint, config: PruneConfig) -> ForwardMasks:
    """Per-layer masks dropping floor(rate*n) units, smallest-magnitude first."""
    cfg = ckpt.config
    masks = full_masks(cfg)
    n_mlp = int(config.mlp_rate * cfg.mlp_dim)
    n_head = int(config.head_rate * cfg.n_heads)
    for layer in range(cfg.n_layers):
        if config.selection == "magnitude":
            mlp_drop = _smallest(_neuron_scores(ckpt, layer), n_mlp)
            head_drop = _smallest(_head_scores(ckpt, layer), n_head)
        else:
            gen = torch.Generator().manual_seed(config.seed * 1009 + layer)
            mlp_drop = torch.randperm(cfg.mlp_dim, generator=gen)[:n_mlp].tolist()
            head_drop = torch.randperm(cfg.n_heads, generator=gen)[:n_head].tolist()
        masks.mlp_mask[layer, mlp_drop] = 0.0
        masks.head_mask[layer, head_drop] = 0.0
    return masks


def masked_param_count(config: ModelConfig, masks: ForwardMasks) -> int:
    """Weights silenced by the masks: 3*hidden per MLP neuron (gate row, up
    row, down column), 4*head_dim*hidden per head (q/k/v rows + o columns)."""
    mlp_zeros = int((masks.mlp_mask == 0).sum())
    head_zeros = int((masks.head_mask == 0).sum())
    return mlp_zeros * 3 * config.hidden + head_zeros * 4 * config.head_dim * config.hidden


@dataclass
class SweepResult:
    points: dict[tuple[float, float], dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {f"{m},{h}": v for (m, h), v in self.points.items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "SweepResult":
        points = {}
        for key, v in obj.items():
            m, h = key.split(",")
            points[(float(m), float(h))] = v
        return cls(points=points)


def prune_sweep(
    ckpt: Checkpoint,
    eval_blocks,
    mlp_rates: Sequence[float],
    head_rates: Sequence[float],
    selection: str = "magnitude",
    micro_batch: int = 8,
) -> SweepResult:
    """CE/PPL over the rate grid; deltas are relative to the unpruned model."""
    base_ce, _ = intrinsic(ckpt, eval_blocks, micro_batch=micro_batch)
    result = SweepResult()
    for mlp_rate in mlp_rates:
        for head_rate in head_rates:
            cfg = PruneConfig(mlp_rate=mlp_rate, head_rate=head_rate, selection=selection)
            masks = build_masks(ckpt, cfg)
            if mlp_rate == 0 and head_rate == 0:
                ce = base_ce  # identical forward; avoid recomputation noise
            else:
                ce, _ = intrinsic(ckpt, eval_blocks, masks=masks, micro_batch=micro_batch)
            result.points[(mlp_rate, head_rate)] = {
                "ce": ce,
                "ppl": math.exp(ce),
                "delta_ce_pct": (ce - base_ce) / base_ce * 100.0,
                "pruned_params": masked_param_count(ckpt.config, masks),
            }
    return result


def select_config(sweep: SweepResult, budget_pct: float) -> PruneConfig:
    """Most aggressive grid point whose CE increase fits the budget."""
    feasible = [
        (v["pruned_params"], m, h)
        for (m, h), v in sweep.points.items()
        if v["delta_ce_pct"] <= budget_pct
    ]
    if not feasible:
        raise CompressError(f"no sweep point within budget {budget_pct}%")
    _, m, h = max(feasible)
    return PruneConfig(mlp_rate=m, head_rate=h)


# ---------------------------------------------------------------------------
# Knowledge distillation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    train: TrainConfig
    alpha: float = 1.0
    beta: float = 0.1
    temperature: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise CompressError("alpha and beta must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            raise CompressError("alpha and beta cannot both be zero")
        if self.temperature <= 0:
            raise CompressError("temperature must be > 0")


def distill_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    labels: torch.Tensor,
    alpha: float = 1.0,
    beta: float = 0.1,
    temperature: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """total = alpha*KL(p_T || p_S) + beta*CE, with T^2 scaling when T != 1.

    KL is the mean over next-token positions of sum_v p_T log(p_T/p_S),
    both distributions softened by the shared temperature.
    """
    t_pred = teacher_logits[:, :-1] / temperature
    s_pred = student_logits[:, :-1] / temperature
    t_logp = F.log_softmax(t_pred, dim=-1)
    s_logp = F.log_softmax(s_pred, dim=-1)
    kl = (t_logp.exp() * (t_logp - s_logp)).sum(dim=-1).mean()
    if temperature != 1.0:
        kl = kl * temperature**2
    ce = ce_loss(student_logits, labels)
    return alpha * kl + beta * ce, kl, ce


def distill(
    teacher: Checkpoint,
    student_config: ModelConfig,
    data,
    config: DistillConfig,
    out_dir=None,
    patience: int | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Train a fresh student against the frozen teacher's token distributions.

    Reuses the pretraining loop (AdamW, schedule, shuffling, logging); the
    logged train_ce field holds the combined distillation objective.
    """
    if teacher.config.vocab_size != student_config.vocab_size:
        raise CompressError(
            f"teacher vocab {teacher.config.vocab_size} != student vocab "
            f"{student_config.vocab_size}"
        )

    def kd_loss_and_grads(ckpt: Checkpoint, ids: torch.Tensor):
        with torch.no_grad():
            t_logits = forward(teacher, ids)
        params = {n: t.detach().clone().requires_grad_(True) for n, t in ckpt.tensors.items()}
        live = Checkpoint(config=ckpt.config, tensors=params)
        total, _, _ = distill_loss(
            t_logits, forward(live, ids), ids,
            alpha=config.alpha, beta=config.beta, temperature=config.temperature,
        )
        if not torch.isfinite(total):
            raise CompressError(f"non-finite distillation loss: {total.item()}")
        total.backward()
        grads = {
            n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in params.items()
        }
        return total.item(), grads

    return pretrain(
        data, student_config, config.train,
        out_dir=out_dir, loss_grad_fn=kd_loss_and_grads, patience=patience,
    )


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


@dataclass
class QuantTensor:
    kind: str  # "int" (scaled integers) or "float" (norm-gain passthrough)
    scale: float
    data: torch.Tensor  # int16 codes, or float32 values for passthrough
    shape: tuple[int, ...]


@dataclass
class QuantizedCheckpoint:
    config: ModelConfig
    bits: int
    tensors: dict[str, QuantTensor]


def quantize(ckpt: Checkpoint, bits: int) -> QuantizedCheckpoint:
    """Symmetric per-tensor quantization: scale = max|w|/qmax, ties-to-even."""
    if bits not in QMAX:
        raise CompressError(f"bits must be one of {sorted(QMAX)}, got {bits}")
    qmax = QMAX[bits]
    out: dict[str, QuantTensor] = {}
    for name, t in ckpt.tensors.items():
        t = t.detach().to(torch.float32)
        if not torch.isfinite(t).all():
            raise CompressError(f"{name}: non-finite weights")
        if name.endswith("norm.weight"):
            out[name] = QuantTensor("float", 1.0, t.clone(), tuple(t.shape))
            continue
        amax = t.abs().max().item()
        scale = amax / qmax
        if scale == 0.0:
            codes = torch.zeros(t.shape, dtype=torch.int16)
        else:
            codes = torch.round(t / scale).clamp(-qmax, qmax).to(torch.int16)
        out[name] = QuantTensor("int", scale, codes, tuple(t.shape))
    return QuantizedCheckpoint(config=ckpt.config, bits=bits, tensors=out)


def dequantize(q: QuantizedCheckpoint) -> Checkpoint:
    tensors = {}
    for name, qt in q.tensors.items():
        if qt.kind == "float":
            tensors[name] = qt.data.clone()
        else:
            tensors[name] = qt.data.to(torch.float32) * qt.scale
    return Checkpoint(config=q.config, tensors=tensors)


def _pack6(codes: torch.Tensor) -> bytes:
    """4 six-bit values into 3 bytes; codes are offset to [0, 62]."""
    vals = (codes.flatten().to(torch.int32) + 31).tolist()
    if any(not 0 <= v <= 63 for v in vals):
        raise CompressError("6-bit code out of range")
    while len(vals) % 4:
        vals.append(0)
    out = bytearray()
    for i in range(0, len(vals), 4):
        word = vals[i] | vals[i + 1] << 6 | vals[i + 2] << 12 | vals[i + 3] << 18
        out += word.to_bytes(3, "little")
    return bytes(out)


def _unpack6(raw: bytes, numel: int) -> torch.Tensor:
    vals: list[int] = []
    for i in range(0, len(raw), 3):
        word = int.from_bytes(raw[i : i + 3], "little")
        for shift in (0, 6, 12, 18):
            vals.append(((word >> shift) & 0x3F) - 31)
    return torch.tensor(vals[:numel], dtype=torch.int16)


def save_quantized(q: QuantizedCheckpoint, path: str | Path) -> None:
    cfg = q.config
    parts = [
        QUANT_MAGIC,
        struct.pack("<IB", QUANT_VERSION, q.bits),
        struct.pack(
            "<IIIIIII",
            cfg.vocab_size, cfg.n_layers, cfg.hidden, cfg.n_heads,
            cfg.head_dim, cfg.mlp_dim, cfg.max_seq,
        ),
        struct.pack("<Bf", int(cfg.tie_embeddings), cfg.rope_theta),
        struct.pack("<I", len(q.tensors)),
    ]
    for name in sorted(q.tensors):
        qt = q.tensors[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", 0 if qt.kind == "int" else 1))
        parts.append(struct.pack("<B", len(qt.shape)))
        parts.append(struct.pack(f"<{len(qt.shape)}I", *qt.shape))
        parts.append(struct.pack("<f", qt.scale))
        if qt.kind == "float":
            parts.append(qt.data.to(torch.float32).contiguous().numpy().tobytes())
        elif q.bits == 8:
            parts.append(qt.data.to(torch.int8).contiguous().numpy().tobytes())
        else:
            parts.append(_pack6(qt.data))
    Path(path).write_bytes(b"".join(parts))


def load_quantized(path: str | Path) -> QuantizedCheckpoint:
    buf = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CompressError(f"{path}: truncated quantized checkpoint")
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(4) != QUANT_MAGIC:
        raise CompressError(f"{path}: bad magic, not a quantized checkpoint")
    version, bits = struct.unpack("<IB", take(5))
    if version != QUANT_VERSION:
        raise CompressError(f"{path}: unsupported version {version}")
    if bits not in QMAX:
        raise CompressError(f"{path}: unsupported bit width {bits}")
    vocab, layers, hidden, heads, head_dim, mlp, max_seq = struct.unpack("<IIIIIII", take(28))
    tie, theta = struct.unpack("<Bf", take(5))
    config = ModelConfig(
        vocab_size=vocab, n_layers=layers, hidden=hidden, n_heads=heads,
        head_dim=head_dim, mlp_dim=mlp, max_seq=max_seq,
        tie_embeddings=bool(tie), rope_theta=float(theta),
    )
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, QuantTensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (kind_code,) = struct.unpack("<B", take(1))
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (scale,) = struct.unpack("<f", take(4))
        numel = math.prod(shape)
        if kind_code == 1:
            data = torch.frombuffer(bytearray(take(4 * numel)), dtype=torch.float32)
            qt = QuantTensor("float", scale, data.reshape(shape).clone(), shape)
        elif bits == 8:
            data = torch.frombuffer(bytearray(take(numel)), dtype=torch.int8)
            qt = QuantTensor("int", scale, data.to(torch.int16).reshape(shape), shape)
        else:
            n_bytes = (numel + 3) // 4 * 3
            qt = QuantTensor("int", scale, _unpack6(take(n_bytes), numel).reshape(shape), shape)
        tensors[name] = qt
    if off != len(buf):
        raise CompressError(f"{path}: {len(buf) - off} trailing bytes")
    return QuantizedCheckpoint(config=config, bits=bits, tensors=tensors)
