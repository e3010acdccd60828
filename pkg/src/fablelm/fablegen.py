"""Combinatorial fable generation: slot inventories crossed into prompts.

A five-slot scaffold (character, setting, challenge, resolution, moral) is
enumerated or sampled into distinct slot tuples, each rendered through a
fixed Romanian prompt template and fed to the model.  Records stream out
as JSONL with per-record seeds derived from the base seed, so any record
can be regenerated in isolation.
"""

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from .model import Checkpoint, generate
from .tokenizer import BOS_ID, EOS_ID, TokenizerModel, decode, encode

PROMPT_TEMPLATE = (
    "Scrie o fabulă despre {character} în {setting}, care înfruntă "
    "{challenge}, se rezolvă prin {resolution}. Morala: {moral}.\n"
)

SLOT_NAMES = ("characters", "settings", "challenges", "resolutions", "morals")

# seed offset between duplicate-regeneration attempts; large and odd so
# bumped seeds do not collide with neighbouring record base seeds
_DUP_SEED_STRIDE = 1_000_003
_MAX_DUP_ATTEMPTS = 3


class FablegenError(Exception):
    pass


class SlotChoice(NamedTuple):
    character: str
    setting: str
    challenge: str
    resolution: str
    moral: str


@dataclass(frozen=True)
class SlotInventory:
    characters: tuple
    settings: tuple
    challenges: tuple
    resolutions: tuple
    morals: tuple

    def __post_init__(self):
        for name in SLOT_NAMES:
            entries = getattr(self, name)
            object.__setattr__(self, name, tuple(entries))
            entries = getattr(self, name)
            if not entries:
                raise FablegenError(f"slot {name!r} is empty")
            if any(not isinstance(e, str) or not e for e in entries):
                raise FablegenError(f"slot {name!r} has an empty entry")
            if len(set(entries)) != len(entries):
                raise FablegenError(f"slot {name!r} has duplicate entries")

    @property
    def sizes(self):
        return tuple(len(getattr(self, n)) for n in SLOT_NAMES)

    @property
    def product(self):
        return math.prod(self.sizes)

    def combo_at(self, index):
        """Slot tuple at a lexicographic rank (first slot most significant)."""
        digits = []
        for size in reversed(self.sizes):
            index, d = divmod(index, size)
            digits.append(d)
        digits.reverse()
        return SlotChoice(*(getattr(self, n)[d] for n, d in zip(SLOT_NAMES, digits)))


def load_inventory(path):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FablegenError(f"cannot read inventory {path}: {exc}") from exc
    missing = [n for n in SLOT_NAMES if n not in obj]
    if missing:
        raise FablegenError(f"inventory missing slots: {missing}")
    return SlotInventory(**{n: obj[n] for n in SLOT_NAMES})


def enumerate_combos(inv, count, seed=0):
    """Distinct slot tuples: exhaustive when count equals the full product,
    otherwise a seeded sample without replacement."""
    total = inv.product
    if count < 1:
        raise FablegenError(f"count must be >= 1, got {count}")
    if count > total:
        raise FablegenError(f"count {count} exceeds the {total} possible combinations")
    if count == total:
        ranks = range(total)
    else:
        ranks = random.Random(seed).sample(range(total), count)
    return [inv.combo_at(r) for r in ranks]


def render_prompt(slots):
    return PROMPT_TEMPLATE.format(
        character=slots.character,
        setting=slots.setting,
        challenge=slots.challenge,
        resolution=slots.resolution,
        moral=slots.moral,
    )


def generate_text(ckpt, tok, prompt, seed, temperature, top_k, max_new):
    """One sampled continuation for a prompt; deterministic in the seed."""
    prompt_ids = [BOS_ID] + encode(tok, prompt)
    out = generate(
        ckpt,
        prompt_ids,
        max_new=max_new,
        temperature=temperature,
        top_k=top_k,
        seed=seed,
        eos_id=EOS_ID,
    )
    return decode(tok, out[len(prompt_ids):])


def _record_line(record):
    return json.dumps(record, ensure_ascii=False) + "\n"


def _load_resume_state(path):
    """Complete records already on disk; a trailing partial line is dropped."""
    raw = Path(path).read_bytes()
    keep = raw.rfind(b"\n") + 1  # 0 when no complete line exists
    try:
        complete = raw[:keep].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FablegenError(f"{path}: not valid UTF-8 ({exc})") from exc
    records = []
    # split only on "\n": record texts may carry other unicode line breaks
    for ln, line in enumerate(complete.split("\n")[:-1], start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FablegenError(f"{path}: line {ln} is not valid JSON ({exc})") from exc
    ids = [r.get("id") for r in records]
    if ids != list(range(len(ids))):
        raise FablegenError(f"{path}: existing ids are not the gapless sequence 0..{len(ids) - 1}")
    return records, keep


def generate_dataset(
    ckpt: Checkpoint,
    tok: TokenizerModel,
    inv: SlotInventory,
    n: int,
    out,
    base_seed: int = 0,
    temperature: float = 0.8,
    top_k: int | None = 40,
    max_new: int = 256,
    resume: bool = False,
):
    """Stream n fable records to a JSONL file; returns the count written.

    Record i uses seed base_seed + i.  Exact-duplicate texts are regenerated
    with a bumped seed up to 3 times, then kept with a duplicate flag.  With
    resume=True, generation continues after the last complete record already
    in the file and yields a file identical to an uninterrupted run.
    """
    if n < 1:
        raise FablegenError(f"n must be >= 1, got {n}")
    out = Path(out)
    combos = enumerate_combos(inv, n, seed=base_seed)

    start = 0
    seen = set()
    mode = "wb"
    if resume and out.exists():
        records, keep = _load_resume_state(out)
        if len(records) > n:
            raise FablegenError(f"{out}: has {len(records)} records but n is {n}")
        with open(out, "r+b") as fh:
            fh.truncate(keep)
        start = len(records)
        seen = {r["text"] for r in records}
        mode = "ab"
    with open(out, mode) as fh:
        for i in range(start, n):
            prompt = render_prompt(combos[i])
            duplicate = False
            for attempt in range(_MAX_DUP_ATTEMPTS + 1):
                seed = base_seed + i + attempt * _DUP_SEED_STRIDE
                text = generate_text(ckpt, tok, prompt, seed, temperature, top_k, max_new)
                if text not in seen:
                    break
            else:
                duplicate = True
            seen.add(text)
            record = {
                "id": i,
                "slots": combos[i]._asdict(),
                "prompt": prompt,
                "text": text,
                "gen_params": {"temperature": temperature, "top_k": top_k, "seed": seed},
                "duplicate": duplicate,
            }
            fh.write(_record_line(record).encode("utf-8"))
            fh.flush()
    return n
