"""Domain types and byte-stable JSONL serialization.

Every type serializes to a single JSON object with a fixed key order and no
insignificant whitespace, so files written from equal values are byte-equal
across runs and platforms. Optional fields are emitted only when set, which
keeps the canonical form a pure function of the value.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

SOURCES = ("ingested", "annotated", "synthetic")
STRATEGIES = ("ge", "random", "entropy", "highscore", "fl")
LEVELS = ("easy", "medium", "hard")


class FormatError(ValueError):
    """Malformed record, file, or field value."""


def _canonical_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def _require_str(record: dict, key: str, ctx: str, allow_empty: bool = False) -> str:
    value = record.get(key)
    if not isinstance(value, str):
        raise FormatError(f"{ctx}: field '{key}' must be a string")
    if not allow_empty and not value:
        raise FormatError(f"{ctx}: field '{key}' must be non-empty")
    return value


def _require_number(record: dict, key: str, ctx: str) -> float:
    value = record.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{ctx}: field '{key}' must be a number")
    if not math.isfinite(value):
        raise FormatError(f"{ctx}: field '{key}' must be finite")
    return float(value)


@dataclass(frozen=True)
class Question:
    """One pool item: a task instruction plus optional string metadata."""

    id: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise FormatError("question id must be non-empty")
        if not self.text:
            raise FormatError(f"question {self.id!r}: text must be non-empty")
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise FormatError(f"question {self.id!r}: metadata must map strings to strings")

    def to_record(self) -> dict:
        rec: dict[str, Any] = {"id": self.id, "text": self.text}
        if self.metadata:
            rec["metadata"] = {k: self.metadata[k] for k in sorted(self.metadata)}
        return rec

    @classmethod
    def from_record(cls, record: dict, ctx: str = "question") -> "Question":
        meta = record.get("metadata", {})
        if not isinstance(meta, dict):
            raise FormatError(f"{ctx}: 'metadata' must be an object")
        return cls(
            id=_require_str(record, "id", ctx),
            text=_require_str(record, "text", ctx),
            metadata=dict(meta),
        )


@dataclass(frozen=True)
class Step:
    """One interaction turn: optional thought, the emitted action, env feedback."""

    action: str
    observation: str = ""
    thought: str = ""

    def __post_init__(self) -> None:
        if not self.action.strip():
            raise FormatError("step action must be non-empty after trimming")

    def to_record(self) -> dict:
        rec: dict[str, Any] = {}
        if self.thought:
            rec["thought"] = self.thought
        rec["action"] = self.action
        rec["observation"] = self.observation
        return rec

    @classmethod
    def from_record(cls, record: dict, ctx: str = "step") -> "Step":
        thought = record.get("thought", "")
        if not isinstance(thought, str):
            raise FormatError(f"{ctx}: 'thought' must be a string")
        return cls(
            action=_require_str(record, "action", ctx),
            observation=_require_str(record, "observation", ctx, allow_empty=True),
            thought=thought,
        )


@dataclass(frozen=True)
class Trajectory:
    """A question's recorded episode: ordered steps plus a scalar reward.

    `question_text` and `initial_observation` are optional carriers for the
    task framing shown to the agent; exporters use them when present so a
    trajectory file is self-contained.
    """

    question_id: str
    guideline_version: str
    steps: tuple[Step, ...]
    reward: float
    source: str
    question_text: str = ""
    initial_observation: str = ""

    def __post_init__(self) -> None:
        if not self.question_id:
            raise FormatError("trajectory question_id must be non-empty")
        if not self.steps:
            raise FormatError(f"trajectory {self.question_id!r}: steps must be non-empty")
        if not 0.0 <= self.reward <= 1.0:
            raise FormatError(
                f"trajectory {self.question_id!r}: reward {self.reward} outside [0,1]"
            )
        if self.source not in SOURCES:
            raise FormatError(
                f"trajectory {self.question_id!r}: source must be one of {SOURCES}"
            )
        object.__setattr__(self, "steps", tuple(self.steps))

    def to_record(self) -> dict:
        rec: dict[str, Any] = {
            "question_id": self.question_id,
            "guideline_version": self.guideline_version,
            "steps": [s.to_record() for s in self.steps],
            "reward": self.reward,
            "source": self.source,
        }
        if self.question_text:
            rec["question_text"] = self.question_text
        if self.initial_observation:
            rec["initial_observation"] = self.initial_observation
        return rec

    @classmethod
    def from_record(cls, record: dict, ctx: str = "trajectory") -> "Trajectory":
        raw_steps = record.get("steps")
        if not isinstance(raw_steps, list):
            raise FormatError(f"{ctx}: 'steps' must be a list")
        steps = tuple(
            Step.from_record(s, ctx=f"{ctx} step {i}") for i, s in enumerate(raw_steps)
        )
        qtext = record.get("question_text", "")
        iobs = record.get("initial_observation", "")
        if not isinstance(qtext, str) or not isinstance(iobs, str):
            raise FormatError(f"{ctx}: optional text fields must be strings")
        return cls(
            question_id=_require_str(record, "question_id", ctx),
            guideline_version=_require_str(record, "guideline_version", ctx),
            steps=steps,
            reward=_require_number(record, "reward", ctx),
            source=_require_str(record, "source", ctx),
            question_text=qtext,
            initial_observation=iobs,
        )


def normalize_guideline_text(text: str) -> str:
    """Right-trim each line and force exactly one trailing newline."""
    lines = [line.rstrip() for line in text.split("\n")]
    body = "\n".join(lines).rstrip("\n")
    return body + "\n"


@dataclass(frozen=True)
class Guideline:
    """Versioned expert text inserted into prompts.

    The version is the first 12 hex chars of SHA-256 over the normalized
    text, so any silent edit invalidates previously computed scores.
    """

    text: str
    version: str = ""

    def __post_init__(self) -> None:
        normalized = normalize_guideline_text(self.text)
        digest = hashlib.sha256(normalized.encode("utf-8")).hexdigest()[:12]
        object.__setattr__(self, "text", normalized)
        object.__setattr__(self, "version", digest)

    @classmethod
    def from_text(cls, text: str) -> "Guideline":
        return cls(text=text)

    @classmethod
    def load(cls, path: str | Path) -> "Guideline":
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot read guideline file {path}: {exc}") from exc
        return cls.from_text(raw)


@dataclass(frozen=True)
class StepScore:
    """Per-step difficulty pair: d_i without guideline, d_g with guideline."""

    d_i: float
    d_g: float
    n_tokens: int

    def __post_init__(self) -> None:
        if self.d_i < 0 or self.d_g < 0:
            raise FormatError("step difficulties must be >= 0")
        if self.n_tokens < 1:
            raise FormatError("n_tokens must be >= 1")

    def to_record(self) -> dict:
        return {"d_i": self.d_i, "d_g": self.d_g, "n_tokens": self.n_tokens}

    @classmethod
    def from_record(cls, record: dict, ctx: str = "step score") -> "StepScore":
        n_tokens = record.get("n_tokens")
        if isinstance(n_tokens, bool) or not isinstance(n_tokens, int):
            raise FormatError(f"{ctx}: 'n_tokens' must be an integer")
        return cls(
            d_i=_require_number(record, "d_i", ctx),
            d_g=_require_number(record, "d_g", ctx),
            n_tokens=n_tokens,
        )


@dataclass(frozen=True)
class ScoreRecord:
    """Scoring result for one question under one guideline and backend."""

    question_id: str
    guideline_version: str
    backend_id: str
    per_step: tuple[StepScore, ...]
    ge: float
    mean_entropy: float | None = None

    def __post_init__(self) -> None:
        if not self.per_step:
            raise FormatError(f"score {self.question_id!r}: per_step must be non-empty")
        object.__setattr__(self, "per_step", tuple(self.per_step))
        if self.mean_entropy is not None and self.mean_entropy < 0:
            raise FormatError(f"score {self.question_id!r}: mean_entropy must be >= 0")
        # ge must be recomputable from per_step up to the sign convention.
        from .scoring import ge_score

        recomputed = ge_score([(s.d_i, s.d_g) for s in self.per_step])
        if min(abs(self.ge - recomputed), abs(self.ge + recomputed)) > 1e-9:
            raise FormatError(
                f"score {self.question_id!r}: ge {self.ge} does not match per_step "
                f"aggregation {recomputed}"
            )

    def to_record(self) -> dict:
        rec: dict[str, Any] = {
            "question_id": self.question_id,
            "guideline_version": self.guideline_version,
            "backend_id": self.backend_id,
            "per_step": [s.to_record() for s in self.per_step],
            "ge": self.ge,
        }
        if self.mean_entropy is not None:
            rec["mean_entropy"] = self.mean_entropy
        return rec

    @classmethod
    def from_record(cls, record: dict, ctx: str = "score") -> "ScoreRecord":
        raw_steps = record.get("per_step")
        if not isinstance(raw_steps, list):
            raise FormatError(f"{ctx}: 'per_step' must be a list")
        per_step = tuple(
            StepScore.from_record(s, ctx=f"{ctx} per_step {i}")
            for i, s in enumerate(raw_steps)
        )
        mean_entropy = record.get("mean_entropy")
        if mean_entropy is not None:
            if isinstance(mean_entropy, bool) or not isinstance(mean_entropy, (int, float)):
                raise FormatError(f"{ctx}: 'mean_entropy' must be a number")
            mean_entropy = float(mean_entropy)
        return cls(
            question_id=_require_str(record, "question_id", ctx),
            guideline_version=_require_str(record, "guideline_version", ctx),
            backend_id=_require_str(record, "backend_id", ctx),
            per_step=per_step,
            ge=_require_number(record, "ge", ctx),
            mean_entropy=mean_entropy,
        )


@dataclass(frozen=True)
class SelectionItem:
    question_id: str
    score: float

    def to_record(self) -> dict:
        return {"question_id": self.question_id, "score": self.score}

    @classmethod
    def from_record(cls, record: dict, ctx: str = "selection item") -> "SelectionItem":
        return cls(
            question_id=_require_str(record, "question_id", ctx),
            score=_require_number(record, "score", ctx),
        )


@dataclass(frozen=True)
class SelectionResult:
    """Ordered subset chosen by one strategy, with per-item scores."""

    strategy: str
    params: dict[str, Any]
    items: tuple[SelectionItem, ...]
    warning: str = ""

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise FormatError(f"selection strategy must be one of {STRATEGIES}")
        object.__setattr__(self, "items", tuple(self.items))
        seen: set[str] = set()
        for item in self.items:
            if item.question_id in seen:
                raise FormatError(f"selection has duplicate question_id {item.question_id!r}")
            seen.add(item.question_id)

    @property
    def question_ids(self) -> list[str]:
        return [item.question_id for item in self.items]

    def to_record(self) -> dict:
        rec: dict[str, Any] = {
            "strategy": self.strategy,
            "params": {k: self.params[k] for k in sorted(self.params)},
            "items": [item.to_record() for item in self.items],
        }
        if self.warning:
            rec["warning"] = self.warning
        return rec

    @classmethod
    def from_record(cls, record: dict, ctx: str = "selection") -> "SelectionResult":
        params = record.get("params", {})
        if not isinstance(params, dict):
            raise FormatError(f"{ctx}: 'params' must be an object")
        raw_items = record.get("items")
        if not isinstance(raw_items, list):
            raise FormatError(f"{ctx}: 'items' must be a list")
        items = tuple(
            SelectionItem.from_record(i, ctx=f"{ctx} item {n}")
            for n, i in enumerate(raw_items)
        )
        warning = record.get("warning", "")
        if not isinstance(warning, str):
            raise FormatError(f"{ctx}: 'warning' must be a string")
        return cls(
            strategy=_require_str(record, "strategy", ctx),
            params=params,
            items=items,
            warning=warning,
        )


def _load_jsonl(path: str | Path, kind: str) -> Iterable[tuple[int, dict]]:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {kind} file {path}: {exc}") from exc
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: malformed {kind} record: {exc}") from exc
        if not isinstance(record, dict):
            raise FormatError(f"{path}:{lineno}: {kind} record must be a JSON object")
        yield lineno, record


def load_pool(path: str | Path) -> list[Question]:
    """Read a question pool, rejecting duplicate ids by line number."""
    questions: list[Question] = []
    seen: dict[str, int] = {}
    for lineno, record in _load_jsonl(path, "pool"):
        try:
            q = Question.from_record(record, ctx=f"{path}:{lineno}")
        except FormatError:
            raise
        if q.id in seen:
            raise FormatError(
                f"{path}:{lineno}: duplicate question id {q.id!r} "
                f"(first seen on line {seen[q.id]})"
            )
        seen[q.id] = lineno
        questions.append(q)
    return questions


def load_trajectories(path: str | Path) -> list[Trajectory]:
    return [
        Trajectory.from_record(record, ctx=f"{path}:{lineno}")
        for lineno, record in _load_jsonl(path, "trajectory")
    ]


def load_scores(path: str | Path) -> list[ScoreRecord]:
    return [
        ScoreRecord.from_record(record, ctx=f"{path}:{lineno}")
        for lineno, record in _load_jsonl(path, "score")
    ]


def load_selection(path: str | Path) -> SelectionResult:
    records = list(_load_jsonl(path, "selection"))
    if len(records) != 1:
        raise FormatError(f"{path}: selection file must contain exactly one record")
    return SelectionResult.from_record(records[0][1], ctx=f"{path}:1")


def dumps_record(record: Any) -> str:
    return _canonical_json(record.to_record() if hasattr(record, "to_record") else record)


def write_records(records: Sequence[Any], path: str | Path) -> None:
    """Write records canonically: one line each, newline-terminated."""
    text = "".join(dumps_record(r) + "\n" for r in records)
    Path(path).write_text(text, encoding="utf-8")
