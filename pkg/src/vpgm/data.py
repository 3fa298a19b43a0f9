"""Question inputs and JSONL persistence helpers."""

from __future__ import annotations

import json
import os
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

LETTERS = string.ascii_uppercase


def option_labels(k: int) -> list[str]:
    if k > len(LETTERS):
        raise ValueError(f"at most {len(LETTERS)} options are supported")
    return list(LETTERS[:k])


@dataclass(frozen=True)
class QuestionInput:
    """One task instance. Options are shown to the model as ``A.``, ``B.``,
    ...; ``gold_label`` is one of those letters."""

    question_id: str
    body: str
    options: tuple[str, ...] | None = None
    caption: str | None = None
    rationale: str | None = None
    context: str | None = None
    gold_label: str | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))
            if len(self.options) < 2:
                raise ValueError(f"question {self.question_id!r}: need at least 2 options")
            if self.gold_label is not None and self.gold_label not in self.labels:
                raise ValueError(f"question {self.question_id!r}: gold label {self.gold_label!r} not among {self.labels}")

    @property
    def labels(self) -> list[str]:
        return option_labels(len(self.options)) if self.options else []

    @property
    def closed_ended(self) -> bool:
        return self.options is not None

    def to_dict(self) -> dict:
        d = {"question_id": self.question_id, "body": self.body}
        if self.options is not None:
            d["options"] = list(self.options)
        for key in ("caption", "rationale", "context", "gold_label"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionInput":
        known = {"question_id", "body", "options", "caption", "rationale", "context", "gold_label"}
        if "question_id" not in d or "body" not in d:
            raise ValueError(f"question record needs question_id and body: {d!r}")
        return cls(
            question_id=str(d["question_id"]),
            body=d["body"],
            options=d.get("options"),
            caption=d.get("caption"),
            rationale=d.get("rationale"),
            context=d.get("context"),
            gold_label=d.get("gold_label"),
            extra={k: v for k, v in d.items() if k not in known},
        )


def dumps(obj) -> str:
    """Canonical one-line JSON used for every persisted record."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None


def write_jsonl(path, rows: Iterable[dict]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")
    os.replace(tmp, path)


def append_jsonl(path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(dumps(row) + "\n")
        fh.flush()


def load_questions(path) -> list[QuestionInput]:
    qs = [QuestionInput.from_dict(d) for d in read_jsonl(path)]
    ids = [q.question_id for q in qs]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"{path}: duplicate question ids {dup}")
    return qs


def write_json(path, obj, indent: int = 2) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=indent, allow_nan=False) + "\n")
    os.replace(tmp, path)
