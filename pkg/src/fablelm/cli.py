"""Command-line entry point wiring every pipeline stage.

Subcommands cover the full path from raw text to evaluated models:
tokenizer training, corpus statistics, packing, pretraining, prune sweeps,
distillation, quantization, evaluation, judge scoring, and fable
generation.  Every run that writes files also writes a RunManifest with
sha256 digests of its inputs so a result can be traced to exact artifacts.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import typing
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .compress import (
    CompressError,
    DistillConfig,
    PruneConfig,
    distill,
    prune_sweep,
    quantize,
    save_quantized,
)
from .corpus import CorpusError, corpus_stats, load_corpus
from .fablegen import FablegenError, generate_dataset, load_inventory
from .judge import JudgeConfig, JudgeError, dry_run_requests, judge_batch
from .metrics import (
    EvalReport,
    MetricError,
    agreement,
    basic_error_count,
    entity_coherence,
    distinct_n,
    grammar_score,
    intrinsic,
    load_gazetteer,
    load_probes,
    readability,
    self_bleu,
    throughput,
)
from .model import ModelConfig, ModelError, load_checkpoint
from .packing import PackingError, load_packed, pack, save_packed
from .report import write_all
from .tokenizer import (
    TokenizerError,
    load_tokenizer,
    save_tokenizer,
    segmentation_stats,
    train_bpe,
    train_unigram,
)
from .train import TrainConfig, TrainError, pretrain

_ERRORS = (
    CorpusError,
    TokenizerError,
    PackingError,
    ModelError,
    TrainError,
    CompressError,
    MetricError,
    JudgeError,
    FablegenError,
    OSError,
)


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Flat key=value configs
# ---------------------------------------------------------------------------


def load_kv_config(path):
    """Flat key=value file: one pair per line, # comments, blanks ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(f"{path}: line {lineno} is not key=value: {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(name, raw, py_type):
    try:
        if py_type is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if py_type is int:
            return int(raw)
        if py_type is float:
            return float(raw)
        if py_type == tuple[float, float]:
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated numbers")
            return tuple(parts)
        return raw
    except ValueError as exc:
        raise CliError(f"config key {name!r}: {exc}") from exc


def config_from_kv(cls, values, label):
    hints = typing.get_type_hints(cls)
    fields = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise CliError(f"{label} config has unknown keys: {unknown}")
    kwargs = {k: _coerce(k, v, fields[k]) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise CliError(f"{label} config incomplete: {exc}") from exc


def apply_overrides(sections, overrides):
    """--set section.key=value pairs, taking precedence over file values."""
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError(f"--set expects section.key=value, got {item!r}")
        target, _, value = item.partition("=")
        section, _, key = target.partition(".")
        if section not in sections:
            raise CliError(f"--set section must be one of {sorted(sections)}, got {section!r}")
        sections[section][key.strip()] = value.strip()
    return sections


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _utc_stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


class ManifestWriter:
    """Collects run provenance and writes it atomically at run end."""

    def __init__(self, subcommand, config, seed, inputs):
        self.manifest = {
            "subcommand": subcommand,
            "version": __version__,
            "seed": seed,
            "config": config,
            "inputs": {str(p): sha256_file(p) for p in inputs},
            "started": _utc_stamp(),
        }

    def write(self, out_path):
        self.manifest["finished"] = _utc_stamp()
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = out_path.with_name(out_path.name + ".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, ensure_ascii=False) + "\n",
                       encoding="utf-8")
        os.replace(tmp, out_path)
        return out_path


def manifest_path_for(out):
    """manifest.json inside a run directory, <name>.manifest.json beside a file."""
    out = Path(out)
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train_tokenizer(args):
    docs = load_corpus(args.input, format=args.format)
    if args.kind == "bpe":
        model = train_bpe(docs, args.vocab_size)
    else:
        model = train_unigram(docs, args.vocab_size)
    writer = ManifestWriter("train-tokenizer", {
        "kind": args.kind, "vocab_size": args.vocab_size, "format": args.format,
        "input": str(args.input), "out": str(args.out),
    }, seed=None, inputs=[args.input])
    save_tokenizer(model, args.out)
    writer.write(manifest_path_for(args.out))
    print(f"wrote {args.out} ({len(model.vocab)} pieces, kind {model.kind})")
    return 0


def cmd_stats(args):
    tok = load_tokenizer(args.model)
    docs = load_corpus(args.input, format=args.format)
    cstats = corpus_stats(docs)
    sstats = segmentation_stats(tok, docs)
    flat = {**dataclasses.asdict(cstats), **dataclasses.asdict(sstats)}
    for key, value in flat.items():
        print(f"{key}={value}")
    if args.out:
        writer = ManifestWriter("stats", {
            "model": str(args.model), "input": str(args.input), "format": args.format,
        }, seed=None, inputs=[args.model, args.input])
        Path(args.out).write_text(json.dumps(flat, indent=2) + "\n", encoding="utf-8")
        writer.write(manifest_path_for(args.out))
    return 0


def cmd_pack(args):
    tok = load_tokenizer(args.tokenizer)
    docs = load_corpus(args.input, format=args.format)
    writer = ManifestWriter("pack", {
        "tokenizer": str(args.tokenizer), "input": str(args.input),
        "format": args.format, "block_len": args.block_len, "out": str(args.out),
    }, seed=None, inputs=[args.tokenizer, args.input])
    dataset = pack(tok, docs, block_len=args.block_len)
    save_packed(dataset, args.out)
    writer.write(manifest_path_for(args.out))
    print(f"wrote {args.out} ({dataset.n_blocks} blocks of {dataset.block_len})")
    return 0


def cmd_pretrain(args):
    dataset = load_packed(args.data)
    sections = apply_overrides({
        "model": load_kv_config(args.model_config),
        "train": load_kv_config(args.train_config),
    }, args.set)
    model_config = config_from_kv(ModelConfig, sections["model"], "model")
    train_config = config_from_kv(TrainConfig, sections["train"], "train")
    writer = ManifestWriter("pretrain", {
        "model": sections["model"], "train": sections["train"], "data": str(args.data),
    }, seed=train_config.seed, inputs=[args.data, args.model_config, args.train_config])
    out_dir = Path(args.out)
    _, run_log = pretrain(dataset, model_config, train_config, out_dir=out_dir)
    write_all(out_dir, run_log=run_log)
    writer.write(manifest_path_for(out_dir))
    final = run_log[-1]
    print(f"trained {train_config.total_steps} steps; eval ce {final['eval_ce']:.4f}")
    return 0


def _rates(raw, flag):
    try:
        return [float(p) for p in raw.split(",") if p != ""]
    except ValueError as exc:
        raise CliError(f"{flag} expects comma-separated rates: {exc}") from exc


def cmd_prune_sweep(args):
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_packed(args.data)
    n = min(args.max_blocks, dataset.n_blocks)
    blocks = torch.from_numpy(np.ascontiguousarray(dataset.tokens[:n], dtype=np.int64))
    writer = ManifestWriter("prune-sweep", {
        "ckpt": str(args.ckpt), "data": str(args.data),
        "mlp_rates": args.mlp_rates, "head_rates": args.head_rates,
        "max_blocks": args.max_blocks,
    }, seed=None, inputs=[args.ckpt, args.data])
    sweep = prune_sweep(ckpt, blocks, _rates(args.mlp_rates, "--mlp-rates"),
                        _rates(args.head_rates, "--head-rates"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(sweep.to_dict(), indent=2) + "\n", encoding="utf-8")
    write_all(out.parent, sweep=sweep)
    writer.write(manifest_path_for(out))
    print(f"wrote {out} ({len(sweep.points)} grid points)")
    return 0


def cmd_distill(args):
    teacher = load_checkpoint(args.teacher)
    dataset = load_packed(args.data)
    sections = apply_overrides({
        "model": load_kv_config(args.student_config),
        "train": load_kv_config(args.train_config),
        "distill": {"alpha": str(args.alpha), "beta": str(args.beta),
                    "temperature": str(args.temperature)},
    }, args.set)
    student_config = config_from_kv(ModelConfig, sections["model"], "student")
    train_config = config_from_kv(TrainConfig, sections["train"], "train")
    dcfg = DistillConfig(
        train=train_config,
        alpha=_coerce("alpha", sections["distill"]["alpha"], float),
        beta=_coerce("beta", sections["distill"]["beta"], float),
        temperature=_coerce("temperature", sections["distill"]["temperature"], float),
    )
    writer = ManifestWriter("distill", {
        "student": sections["model"], "train": sections["train"],
        "distill": sections["distill"], "teacher": str(args.teacher),
        "data": str(args.data),
    }, seed=train_config.seed, inputs=[args.teacher, args.data,
                                       args.student_config, args.train_config])
    out_dir = Path(args.out)
    _, run_log = distill(teacher, student_config, dataset, dcfg, out_dir=out_dir)
    write_all(out_dir, run_log=run_log)
    writer.write(manifest_path_for(out_dir))
    print(f"distilled {train_config.total_steps} steps; eval ce {run_log[-1]['eval_ce']:.4f}")
    return 0


def cmd_quantize(args):
    ckpt = load_checkpoint(args.ckpt)
    writer = ManifestWriter("quantize", {
        "ckpt": str(args.ckpt), "bits": args.bits, "out": str(args.out),
    }, seed=None, inputs=[args.ckpt])
    save_quantized(quantize(ckpt, bits=args.bits), args.out)
    ratio = Path(args.out).stat().st_size / Path(args.ckpt).stat().st_size
    writer.write(manifest_path_for(args.out))
    print(f"wrote {args.out} ({args.bits}-bit, {ratio:.1%} of float32 size)")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    tok = load_tokenizer(args.tokenizer)
    dataset = load_packed(args.data)
    n = min(args.max_blocks, dataset.n_blocks)
    blocks = torch.from_numpy(np.ascontiguousarray(dataset.tokens[:n], dtype=np.int64))
    probes = load_probes(args.probes)
    gaz = load_gazetteer(args.gazetteer)
    texts = [d.text for d in load_corpus(args.gen_file, format=args.gen_format)]
    writer = ManifestWriter("eval", {
        "ckpt": str(args.ckpt), "tokenizer": str(args.tokenizer),
        "data": str(args.data), "probes": str(args.probes),
        "gazetteer": str(args.gazetteer), "gen_file": str(args.gen_file),
        "max_blocks": args.max_blocks,
    }, seed=None, inputs=[args.ckpt, args.tokenizer, args.data, args.probes,
                          args.gazetteer, args.gen_file])
    ce, ppl = intrinsic(ckpt, blocks)
    report = EvalReport(
        ce=ce,
        ppl=ppl,
        agreement_acc=agreement(ckpt, tok, probes),
        coherence=sum(entity_coherence(t, gaz) for t in texts) / len(texts),
        grammar_score=sum(grammar_score(basic_error_count(t), t) for t in texts) / len(texts),
        distinct_n={n: distinct_n(texts, n) for n in (1, 2, 3)},
        self_bleu=self_bleu(texts) if len(texts) >= 2 else 0.0,
        readability=sum(readability(t) for t in texts) / len(texts),
        tokens_per_sec=throughput(ckpt, prompt_len=args.tps_prompt_len,
                                  gen_len=args.tps_gen_len, batch=args.tps_batch,
                                  repeats=args.tps_repeats),
    )
    payload = dataclasses.asdict(report)
    payload["distinct_n"] = {str(k): v for k, v in payload["distinct_n"].items()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    write_all(out.parent, report=report)
    writer.write(manifest_path_for(out))
    print(f"wrote {out} (ce {ce:.4f}, ppl {ppl:.2f})")
    return 0


def cmd_judge(args):
    lines = [l for l in Path(args.input).read_text(encoding="utf-8").splitlines() if l.strip()]
    config = JudgeConfig(
        endpoint_url=args.endpoint,
        model_name=args.model,
        temperature=args.temperature,
        max_parallel=args.parallel,
        timeout=args.timeout,
        retries=args.retries,
    )
    writer = ManifestWriter("judge", {
        "input": str(args.input), "endpoint": args.endpoint, "model": args.model,
        "temperature": args.temperature, "parallel": args.parallel,
        "dry_run": args.dry_run,
    }, seed=None, inputs=[args.input])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.dry_run:
        with open(out, "w", encoding="utf-8") as fh:
            for body in dry_run_requests(lines, config):
                fh.write(json.dumps(body, ensure_ascii=False) + "\n")
        writer.write(manifest_path_for(out))
        print(f"dry run: wrote {len(lines)} request bodies to {out}")
        return 0
    result = judge_batch(lines, config)
    with open(out, "w", encoding="utf-8") as fh:
        for i, (text, verdict) in enumerate(zip(lines, result.verdicts)):
            if verdict is None:
                record = {"id": i, "text": text, "error": result.errors[i]}
            else:
                record = {"id": i, "text": text, **verdict.to_dict()}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        fh.write(json.dumps({"aggregate": {
            "mean_fluency": result.mean_fluency,
            "mean_coherence": result.mean_coherence,
            "total_mistakes": result.total_mistakes,
            "failed_lines": len(result.errors),
        }}, ensure_ascii=False) + "\n")
    writer.write(manifest_path_for(out))
    print(f"judged {len(lines)} lines: mean fluency {result.mean_fluency:.1f}, "
          f"mean coherence {result.mean_coherence:.1f}, {len(result.errors)} failed")
    return 0


def cmd_generate(args):
    ckpt = load_checkpoint(args.ckpt)
    tok = load_tokenizer(args.tokenizer)
    inv = load_inventory(args.inventory)
    writer = ManifestWriter("generate", {
        "ckpt": str(args.ckpt), "tokenizer": str(args.tokenizer),
        "inventory": str(args.inventory), "n": args.n, "seed": args.seed,
        "temperature": args.temperature, "top_k": args.top_k,
        "max_new": args.max_new, "resume": args.resume,
    }, seed=args.seed, inputs=[args.ckpt, args.tokenizer, args.inventory])
    written = generate_dataset(
        ckpt, tok, inv, args.n, args.out,
        base_seed=args.seed, temperature=args.temperature, top_k=args.top_k,
        max_new=args.max_new, resume=args.resume,
    )
    writer.write(manifest_path_for(args.out))
    print(f"wrote {written} records to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fablelm",
        description="Small Romanian fable language models: data, training, "
                    "compression, and evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="subcommand")

    p = sub.add_parser("train-tokenizer", help="train a subword tokenizer on a corpus")
    p.add_argument("--kind", choices=["bpe", "unigram"], required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["lines", "jsonl"], default="lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("stats", help="corpus and segmentation statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["lines", "jsonl"], default="lines")
    p.add_argument("--out", default=None, help="also write the stats as JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pack", help="tokenize a corpus into fixed-length blocks")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["lines", "jsonl"], default="lines")
    p.add_argument("--block-len", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("pretrain", help="train a model on packed blocks")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (sections: model, train)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune-sweep", help="grid CE cost of structured pruning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mlp-rates", default="0,0.3,0.5,0.7")
    p.add_argument("--head-rates", default="0,0.3,0.5")
    p.add_argument("--max-blocks", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune_sweep)

    p = sub.add_parser("distill", help="train a student against a teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (sections: model, train, distill)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("quantize", help="write a reduced-precision checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bits", type=int, choices=[8, 6], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="full evaluation report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--gazetteer", required=True)
    p.add_argument("--gen-file", required=True)
    p.add_argument("--gen-format", choices=["lines", "jsonl"], default="jsonl")
    p.add_argument("--max-blocks", type=int, default=64)
    p.add_argument("--tps-prompt-len", type=int, default=16)
    p.add_argument("--tps-gen-len", type=int, default=32)
    p.add_argument("--tps-batch", type=int, default=4)
    p.add_argument("--tps-repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("judge", help="score generated lines with an external judge")
    p.add_argument("--input", required=True)
    p.add_argument("--endpoint", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--parallel", type=int, default=4)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--dry-run", action="store_true",
                   help="write request bodies without sending")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("generate", help="emit a synthetic fable dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--inventory", required=True)
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.8)
    p.add_argument("--top-k", type=int, default=40)
    p.add_argument("--max-new", type=int, default=256)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, *_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
