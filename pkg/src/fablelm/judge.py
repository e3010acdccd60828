"""LLM-as-a-judge client: per-line fluency/coherence scoring over HTTP.

Each generated line is sent to a chat-completion endpoint with a fixed
rubric prompt and the structured JSON verdict is parsed back.  Requests
run with bounded parallelism and per-line retries; failed lines are
recorded and excluded from the aggregate means.
"""

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

SYSTEM_PROMPT = (
    "You are an expert in Romanian language. You evaluate texts for fluency, "
    "coherence, and grammatical accuracy with precision. Always respond in "
    "valid JSON format only, no additional text."
)

USER_TEMPLATE = """Evaluate the following Romanian text line for fluency, coherence, and grammatical mistakes.

Text:
{text}

Analyze the text and:
1. **Fluency** (0-100): How natural and fluent the text sounds in Romanian. Consider:
   - Natural word order and phrasing
   - Appropriate use of Romanian expressions
   - Smooth flow and readability
   - 100 = perfectly fluent, natural Romanian
   - 80-99 = very fluent with minor awkwardness
   - 60-79 = mostly fluent but some awkward phrasing
   - 40-59 = somewhat fluent but noticeable issues
   - 0-39 = not fluent, very awkward

2. **Coherence** (0-100): How well the text makes sense and maintains logical flow. Consider:
   - Logical structure and meaning
   - Clear connections between ideas
   - Consistency in narrative/argument
   - 100 = perfectly coherent and clear
   - 80-99 = very coherent with minor issues
   - 60-79 = mostly coherent but some confusion
   - 40-59 = somewhat coherent but unclear parts
   - 0-39 = incoherent, confusing

3. **Mistakes**: Count and identify all grammatical mistakes (agreement, conjugation, declension, word choice, etc.)

Respond in JSON format with the following structure:
{
  "fluency": <score 0-100>,
  "coherence": <score 0-100>,
  "total_mistakes": <exact count of mistakes>,
  "mistakes": [
    {
      "position": "<position in text>",
      "type": "<type of mistake>",
      "original": "<incorrect text>",
      "correction": "<suggested correction>",
      "explanation": "<short explanation>"
    }
  ]
}"""

API_KEY_VAR = "JUDGE_API_KEY"
BACKOFF_BASE = 0.5  # seconds; doubles per retry


class JudgeError(Exception):
    pass


@dataclass(frozen=True)
class JudgeConfig:
    endpoint_url: str
    model_name: str
    temperature: float = 0.1
    max_parallel: int = 4
    timeout: float = 60.0
    retries: int = 2

    def __post_init__(self):
        if self.temperature < 0:
            raise JudgeError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_parallel < 1:
            raise JudgeError(f"max_parallel must be >= 1, got {self.max_parallel}")
        if self.retries < 0:
            raise JudgeError(f"retries must be >= 0, got {self.retries}")
        if self.timeout <= 0:
            raise JudgeError(f"timeout must be positive, got {self.timeout}")


@dataclass
class LineVerdict:
    fluency: int
    coherence: int
    total_mistakes: int
    mistakes: list = field(default_factory=list)
    clamped: bool = False

    def __post_init__(self):
        for name in ("fluency", "coherence"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise JudgeError(f"{name} out of range: {v}")
        if self.total_mistakes != len(self.mistakes):
            raise JudgeError(
                f"total_mistakes {self.total_mistakes} does not match "
                f"{len(self.mistakes)} listed mistakes"
            )

    def to_dict(self):
        return {
            "fluency": self.fluency,
            "coherence": self.coherence,
            "total_mistakes": self.total_mistakes,
            "mistakes": self.mistakes,
            "clamped": self.clamped,
        }


@dataclass
class BatchResult:
    verdicts: list  # LineVerdict per line, None where the line failed
    errors: dict  # line index -> failure message
    mean_fluency: float
    mean_coherence: float
    total_mistakes: int


def build_prompt(text):
    """Return the (system, user) message pair for one text line."""
    if not text:
        raise JudgeError("cannot judge an empty text line")
    return SYSTEM_PROMPT, USER_TEMPLATE.replace("{text}", text, 1)


def build_request(text, config):
    """Chat-completion request body for one line; carries the config temperature."""
    system, user = build_prompt(text)
    return {
        "model": config.model_name,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": config.temperature,
    }


def _strip_fence(raw):
    s = raw.strip()
    if s.startswith("```"):
        first_nl = s.find("\n")
        if first_nl >= 0 and s.endswith("```"):
            s = s[first_nl + 1 : -3].strip()
    return s


def _clamp_score(obj, key, clamped):
    if key not in obj:
        raise JudgeError(f"verdict missing required field {key!r}")
    v = obj[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise JudgeError(f"verdict field {key!r} is not a number: {v!r}")
    v = int(round(v))
    if v < 0:
        return 0, True
    if v > 100:
        return 100, True
    return v, clamped


def parse_verdict(raw):
    """Parse a judge response body into a LineVerdict.

    Tolerates a fenced code block wrapper; out-of-range scores are clamped
    and flagged.  Missing fluency or coherence is an error.
    """
    body = _strip_fence(raw)
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise JudgeError(f"unparseable verdict ({exc}): {raw!r}") from exc
    if not isinstance(obj, dict):
        raise JudgeError(f"verdict is not a JSON object: {raw!r}")
    clamped = False
    fluency, clamped = _clamp_score(obj, "fluency", clamped)
    coherence, clamped = _clamp_score(obj, "coherence", clamped)
    mistakes = obj.get("mistakes", [])
    if not isinstance(mistakes, list):
        raise JudgeError(f"mistakes is not a list: {mistakes!r}")
    return LineVerdict(
        fluency=fluency,
        coherence=coherence,
        total_mistakes=len(mistakes),
        mistakes=mistakes,
        clamped=clamped,
    )


def _api_key():
    key = os.environ.get(API_KEY_VAR)
    if not key:
        raise JudgeError(f"missing credential: set {API_KEY_VAR}")
    return key


def _judge_line(text, config, headers):
    body = build_request(text, config)
    last = None
    for attempt in range(config.retries + 1):
        if attempt > 0:
            time.sleep(BACKOFF_BASE * 2 ** (attempt - 1))
        try:
            resp = requests.post(
                config.endpoint_url, json=body, headers=headers, timeout=config.timeout
            )
            if resp.status_code != 200:
                last = f"HTTP {resp.status_code}"
                continue
            content = resp.json()["choices"][0]["message"]["content"]
            return parse_verdict(content)
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            last = f"{type(exc).__name__}: {exc}"
        except JudgeError as exc:
            last = str(exc)
    raise JudgeError(f"line failed after {config.retries + 1} attempts: {last}")


def dry_run_requests(lines, config):
    """Request bodies for every line, without sending anything."""
    return [build_request(t, config) for t in lines]


def judge_batch(lines, config):
    """Judge every line with bounded parallelism and aggregate the verdicts.

    Failed lines (after retries) are recorded in errors and excluded from
    the means.  Verdict order matches input order.
    """
    if not lines:
        raise JudgeError("no lines to judge")
    headers = {"Authorization": f"Bearer {_api_key()}"}

    def run(text):
        try:
            return _judge_line(text, config, headers), None
        except JudgeError as exc:
            return None, str(exc)

    with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
        outcomes = list(pool.map(run, lines))

    verdicts = [v for v, _ in outcomes]
    errors = {i: err for i, (_, err) in enumerate(outcomes) if err is not None}
    ok = [v for v in verdicts if v is not None]
    if not ok:
        raise JudgeError(f"all {len(lines)} lines failed; first error: {errors[0]}")
    return BatchResult(
        verdicts=verdicts,
        errors=errors,
        mean_fluency=math.fsum(v.fluency for v in ok) / len(ok),
        mean_coherence=math.fsum(v.coherence for v in ok) / len(ok),
        total_mistakes=sum(v.total_mistakes for v in ok),
    )
