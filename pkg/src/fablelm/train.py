"""Pretraining loop: AdamW, linear warmup + linear decay, gradient
accumulation, seeded shuffling, periodic eval checkpoints, JSONL run logs.

The optimizer works directly on a checkpoint's named tensor map, and the loss
is a pluggable callable, so distillation reuses this exact loop with a
different objective. Everything on the math path is driven by explicitly
seeded generators consumed in a fixed order; given equal seeds, two runs
produce identical parameters and identical logs (wall-clock fields aside).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .metrics import intrinsic
from .model import (
    Checkpoint,
    ModelConfig,
    init_checkpoint,
    loss_and_grads,
    save_checkpoint,
)
from .packing import PackedDataset, split_held_out

ADAM_EPS = 1e-8
GRAD_CLIP = 1.0


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float
    total_steps: int
    warmup_steps: int
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    micro_batch: int = 8
    accum_steps: int = 1
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at step 1 and the final step

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise TrainError(
                f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}/{self.total_steps}"
            )
        if self.peak_lr <= 0:
            raise TrainError("peak_lr must be > 0")
        if self.accum_steps < 1 or self.micro_batch < 1:
            raise TrainError("accum_steps and micro_batch must be >= 1")


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear ramp to peak over warmup, then linear decay to 0 at total."""
    if not 0 <= step <= config.total_steps:
        raise TrainError(f"step {step} outside [0, {config.total_steps}]")
    if step <= config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    if config.total_steps == config.warmup_steps:
        return config.peak_lr
    return config.peak_lr * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: dict,
    lr: float,
    config: TrainConfig,
) -> None:
    """One decoupled-decay Adam update, in place on params and state."""
    if not state:
        state["step"] = 0
        state["m"] = {n: torch.zeros_like(p) for n, p in params.items()}
        state["v"] = {n: torch.zeros_like(p) for n, p in params.items()}
    step = state["step"] + 1
    b1, b2 = config.betas
    for name in sorted(params):
        g = grads[name]
        if not torch.isfinite(g).all():
            raise TrainError(f"non-finite gradient in {name} at optimizer step {step}")
        p = params[name]
        with torch.no_grad():
            p.mul_(1.0 - lr * config.weight_decay)  # decoupled decay first
            m = state["m"][name].mul_(b1).add_(g, alpha=1 - b1)
            v = state["v"][name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            p.sub_(lr * m_hat / (v_hat.sqrt() + ADAM_EPS))
    state["step"] = step


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float = GRAD_CLIP) -> float:
    """Scale grads in place to a global L2 norm cap; returns pre-clip norm."""
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
    return total


def _micro_batches(tokens: torch.Tensor, micro_batch: int, gen: torch.Generator) -> Iterator[torch.Tensor]:
    n = tokens.shape[0]
    if micro_batch > n:
        raise TrainError(f"micro_batch {micro_batch} exceeds {n} training blocks")
    while True:
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n - micro_batch + 1, micro_batch):
            yield tokens[perm[start : start + micro_batch]]


LossGradFn = Callable[[Checkpoint, torch.Tensor], tuple[float, dict[str, torch.Tensor]]]


def pretrain(
    dataset: PackedDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    loss_grad_fn: LossGradFn | None = None,
    init: Checkpoint | None = None,
    patience: int | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Train from scratch on packed blocks; returns checkpoint and run log.

    The last 1% of blocks (at least one) is held out for eval records, which
    appear at step 1, every ``eval_every`` steps, and the final step.
    ``patience`` stops early after that many evals without improvement.
    """
    tc = train_config
    if dataset.vocab_size != model_config.vocab_size:
        raise TrainError(
            f"dataset vocab {dataset.vocab_size} != model vocab {model_config.vocab_size}"
        )
    train_np, eval_np = split_held_out(dataset)
    train_tokens = torch.from_numpy(np.ascontiguousarray(train_np, dtype=np.int64))
    eval_tokens = torch.from_numpy(np.ascontiguousarray(eval_np, dtype=np.int64))

    ckpt = init if init is not None else init_checkpoint(model_config, seed=tc.seed)
    fn = loss_grad_fn if loss_grad_fn is not None else loss_and_grads
    batches = _micro_batches(train_tokens, tc.micro_batch, torch.Generator().manual_seed(tc.seed + 1))
    state: dict = {}
    run_log: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    best_eval = float("inf")
    stale_evals = 0
    for step in range(1, tc.total_steps + 1):
        t0 = time.perf_counter()
        ce_sum = 0.0
        grad_sum: dict[str, torch.Tensor] | None = None
        for _ in range(tc.accum_steps):
            ids = next(batches)
            loss, grads = fn(ckpt, ids)
            ce_sum += loss
            if grad_sum is None:
                grad_sum = grads
            else:
                for name, g in grads.items():
                    grad_sum[name] += g
        assert grad_sum is not None
        for g in grad_sum.values():
            g /= tc.accum_steps
        grad_norm = clip_grads(grad_sum)
        lr = lr_at(tc, step)
        adamw_step(ckpt.tensors, grad_sum, state, lr, tc)
        elapsed = time.perf_counter() - t0
        record = {
            "step": step,
            "lr": lr,
            "train_ce": ce_sum / tc.accum_steps,
            "grad_norm": grad_norm,
            "tokens_per_sec": tc.accum_steps * tc.micro_batch * dataset.block_len / elapsed,
        }

        is_eval = step == 1 or step == tc.total_steps or (
            tc.eval_every > 0 and step % tc.eval_every == 0
        )
        if is_eval:
            eval_ce, eval_ppl = intrinsic(ckpt, eval_tokens, micro_batch=tc.micro_batch)
            record["eval_ce"] = eval_ce
            record["eval_ppl"] = eval_ppl
            if out_dir is not None:
                save_checkpoint(ckpt, out_dir / f"step{step:06d}.ckpt")
            if eval_ce < best_eval - 1e-12:
                best_eval = eval_ce
                stale_evals = 0
            else:
                stale_evals += 1
        run_log.append(record)
        if patience is not None and is_eval and stale_evals > patience:
            break

    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "model.ckpt")
        save_runlog(run_log, out_dir / "runlog.jsonl")
    return ckpt, run_log


def save_runlog(run_log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in run_log:
            f.write(json.dumps(record) + "\n")


def load_runlog(path: str | Path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records
