"""Prompt rendering for structure discovery and verbalized inference, and
parsing of the structured replies that come back.

Templates are plain UTF-8 files with ``{{placeholder}}`` slots. They are
looked up in an explicit directory, then ``$VPGM_TEMPLATE_DIR``, then the
copies bundled with the package.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .data import QuestionInput
from .errors import StructureFormatError, UnparseableReply
from .graph import (
    OBSERVED_ID,
    OUTPUT_ID,
    DependencyEdge,
    PgmStructure,
    topological_order,
)

log = logging.getLogger(__name__)

TEMPLATE_ENV = "VPGM_TEMPLATE_DIR"
REASONING_HEADER = "## Reasoning Steps"

_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
_FENCE = re.compile(r"```(?:[A-Za-z]*)?\s*(.*?)```", re.DOTALL)
_NUMBER = r"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(%?)"


def load_template(name: str, template_dir=None) -> str:
    directory = template_dir or os.environ.get(TEMPLATE_ENV)
    if directory:
        path = Path(directory) / f"{name}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8")
        log.debug("template %s not in %s, using bundled copy", name, directory)
    return resources.files("vpgm").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def render_template(template: str, values: dict) -> str:
    def sub(m):
        key = m.group(1)
        if key not in values:
            raise KeyError(f"template placeholder {{{{{key}}}}} has no value")
        return str(values[key])

    return _PLACEHOLDER.sub(sub, template)


# -- discovery -------------------------------------------------------------

@dataclass(frozen=True)
class DiscoverySpec:
    task_description: str
    example_pairs: tuple[tuple[str, str], ...] = ()
    context: str = ""
    max_latents: int = 4
    fixed_edges: tuple[DependencyEdge, ...] = ()

    def __post_init__(self):
        if self.max_latents < 1:
            raise ValueError("max_latents must be at least 1")
        object.__setattr__(self, "example_pairs", tuple(tuple(p) for p in self.example_pairs))
        edges = tuple(e if isinstance(e, DependencyEdge) else DependencyEdge.parse(e) for e in self.fixed_edges)
        object.__setattr__(self, "fixed_edges", edges)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscoverySpec":
        cons = d.get("constraints", {})
        edges = []
        for e in cons.get("fixed_edges", []):
            edges.append(DependencyEdge.from_dict(e) if isinstance(e, dict) else DependencyEdge.parse(e))
        return cls(
            task_description=d["task_description"],
            example_pairs=tuple((p["input"], p["output"]) if isinstance(p, dict) else tuple(p)
                                for p in d.get("example_pairs", [])),
            context=d.get("context", ""),
            max_latents=int(cons.get("max_latents", 4)),
            fixed_edges=tuple(edges),
        )


def build_discovery_prompt(spec: DiscoverySpec, template_dir=None) -> str:
    if spec.example_pairs:
        pairs = "\n".join(
            f"Example {i}:\n  Input: {inp}\n  Output: {out}"
            for i, (inp, out) in enumerate(spec.example_pairs, 1)
        )
    else:
        pairs = "(no examples provided)"
    context = f"\n## Contextual Information\n{spec.context.strip()}\n" if spec.context.strip() else ""
    if spec.fixed_edges:
        fixed = "- The following dependencies must be present:\n" + "\n".join(
            f"  - {e}" for e in spec.fixed_edges
        ) + "\n"
    else:
        fixed = ""
    values = {
        "task_description": spec.task_description.strip(),
        "example_pairs": pairs,
        "context_section": context,
        "max_latents": spec.max_latents,
        "max_latents_sentence": f"Please identify at most {spec.max_latents} latent variables.",
        "fixed_edges": fixed,
    }
    return render_template(load_template("discovery", template_dir), values)


def build_discovery_retry_prompt(spec: DiscoverySpec, previous_reply: str, violations: Sequence[str],
                                 template_dir=None) -> str:
    base = build_discovery_prompt(spec, template_dir)
    listed = "\n".join(f"- {v}" for v in violations)
    return (
        f"{base}\n## Previous Attempt\nYour previous reply was:\n{previous_reply.strip()}\n\n"
        f"It was rejected for these reasons:\n{listed}\n"
        "Reply again with a corrected JSON block.\n"
    )


def parse_structure_reply(raw: str) -> PgmStructure:
    """Decode a discovery reply: last fenced block, else the whole text."""
    candidates = [m.group(1) for m in _FENCE.finditer(raw)][::-1] + [raw]
    last_err = None
    for text in candidates:
        try:
            obj = json.loads(text.strip())
        except json.JSONDecodeError as exc:
            last_err = exc
            continue
        if isinstance(obj, dict):
            return PgmStructure.from_dict(obj)
    raise StructureFormatError(f"no PGM JSON object found in reply ({last_err})")


# -- inference -------------------------------------------------------------

@dataclass(frozen=True)
class InferencePrompt:
    text: str
    structure_id: str
    question_id: str


def _model_section(structure: PgmStructure, order: list[str]) -> str:
    lines = [
        f"- {OBSERVED_ID}: the observed input shown below.",
    ]
    for vid in order:
        if vid in (OBSERVED_ID, OUTPUT_ID):
            continue
        v = structure.variable(vid)
        label = f"{vid} ({v.name})" if v.name and v.name != vid else vid
        lines.append(f"- {label}: {v.description}".rstrip(": ").rstrip())
    lines.append(f"- {OUTPUT_ID}: the final answer.")
    lines.append("")
    lines.append("Dependencies:")
    for e in structure.edges:
        lines.append(f"- {e}")
    cpd_lines = []
    for vid in order:
        cpd = structure.cpd(vid)
        if cpd is not None:
            given = ", ".join(cpd.parents) or "nothing"
            cpd_lines.append(f"- P({vid} | {given}): {cpd.description}")
    if cpd_lines:
        lines.append("")
        lines.append("Conditional distributions:")
        lines.extend(cpd_lines)
    return "\n".join(lines) + "\n"


def _question_section(q: QuestionInput) -> str:
    lines = [f"Question: {q.body.strip()}"]
    if q.options:
        lines.append("Options:")
        lines.extend(f"{lab}. {opt}" for lab, opt in zip(q.labels, q.options))
    if q.caption:
        lines.append(f"Image caption: {q.caption.strip()}")
    if q.rationale:
        lines.append(f"Rationale: {q.rationale.strip()}")
    if q.context:
        lines.append(f"Retrieved context: {q.context.strip()}")
    return "\n".join(lines) + "\n"


def build_inference_prompt(structure: PgmStructure, question: QuestionInput,
                           template_dir=None) -> InferencePrompt:
    """Render the per-question inference prompt.

    Latent variables are walked in topological order, one reasoning step
    each. With no latents the prompt asks for an answer plus a single
    confidence.
    """
    if not question.body or not question.body.strip():
        raise ValueError(f"question {question.question_id!r} has an empty body")
    order = topological_order(structure)
    latents = [v for v in order if v not in (OBSERVED_ID, OUTPUT_ID)]

    if latents:
        steps = [REASONING_HEADER]
        for i, vid in enumerate(latents, 1):
            name = structure.variable(vid).name
            named = f" ({name})" if name and name != vid else ""
            steps.append(
                f"Step {i}. Infer {vid}{named} given the values already inferred for its parents, "
                "and state the probability that it holds."
            )
        reasoning = "\n".join(steps) + "\n"
        answer = (
            "Using the inferred latent variables, choose the answer and state P(Y | Z), "
            "the probability that the chosen answer is correct."
        )
        schema = {"answer": "<label>", "latent_probs": {vid: 0.0 for vid in latents}, "final_prob": 0.0}
    else:
        reasoning = ""
        answer = "Answer the question directly and state your confidence that the answer is correct."
        schema = {"answer": "<label>", "final_prob": 0.0}
    if question.options:
        answer += f" The answer must be one of: {', '.join(question.labels)}."
    else:
        answer += " The answer is free text."

    values = {
        "task_description": (structure.task_description or "Answer the question.").strip(),
        "model_section": _model_section(structure, order),
        "question_section": _question_section(question),
        "reasoning_section": reasoning,
        "answer_instruction": answer,
        "reply_schema": json.dumps(schema),
    }
    text = render_template(load_template("inference", template_dir), values)
    return InferencePrompt(text, structure.structure_id(), question.question_id)


def reasoning_section(prompt_text: str) -> str:
    """The reasoning-steps block of a rendered inference prompt ('' if none)."""
    start = prompt_text.find(REASONING_HEADER)
    if start < 0:
        return ""
    end = prompt_text.find("\n## ", start + len(REASONING_HEADER))
    return prompt_text[start:end if end >= 0 else None]


# -- reply parsing ---------------------------------------------------------

@dataclass(frozen=True)
class ParsedReply:
    answer_label: str
    latent_probs: dict = field(default_factory=dict)
    final_prob: float | None = None
    verbalized_confidence: float | None = None
    partial: bool = False
    warnings: tuple[str, ...] = field(default=(), compare=False)
    raw_text: str = field(default="", compare=False)

    def to_dict(self) -> dict:
        return {
            "answer_label": self.answer_label,
            "latent_probs": dict(self.latent_probs),
            "final_prob": self.final_prob,
            "verbalized_confidence": self.verbalized_confidence,
            "partial": self.partial,
            "warnings": list(self.warnings),
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedReply":
        return cls(
            d["answer_label"], dict(d.get("latent_probs", {})), d.get("final_prob"),
            d.get("verbalized_confidence"), bool(d.get("partial", False)),
            tuple(d.get("warnings", ())), d.get("raw_text", ""),
        )


def render_reply(reply: ParsedReply) -> str:
    """Canonical reply text; ``parse_reply`` inverts it."""
    obj = {"answer": reply.answer_label, "latent_probs": dict(reply.latent_probs)}
    if reply.final_prob is not None:
        obj["final_prob"] = reply.final_prob
    if reply.verbalized_confidence is not None:
        obj["confidence"] = reply.verbalized_confidence
    return "```json\n" + json.dumps(obj, sort_keys=True) + "\n```"


def _coerce_prob(value, what: str, warnings: list) -> float | None:
    if isinstance(value, bool) or value is None:
        return None
    if isinstance(value, str):
        m = re.fullmatch(r"\s*" + _NUMBER + r"\s*", value)
        if not m:
            warnings.append(f"{what}: non-numeric value {value!r} ignored")
            return None
        x = float(m.group(1)) / (100.0 if m.group(2) else 1.0)
    elif isinstance(value, (int, float)):
        x = float(value)
    else:
        warnings.append(f"{what}: unsupported value {value!r} ignored")
        return None
    if math.isnan(x):
        warnings.append(f"{what}: NaN ignored")
        return None
    if x < 0.0 or x > 1.0:
        clamped = min(1.0, max(0.0, x))
        warnings.append(f"{what}: {x!r} clamped to {clamped}")
        log.warning("probability %s=%r clamped to %s", what, x, clamped)
        return clamped
    return x


def _normalize_label(label) -> str | None:
    if label is None or isinstance(label, (dict, list, bool)):
        return None
    s = str(label).strip().strip("*").strip()
    s = re.sub(r"^\(?([A-Za-z])\)?[.)]?$", lambda m: m.group(1).upper(), s)
    return s or None


def _from_json_block(raw: str) -> dict | None:
    for m in reversed(list(_FENCE.finditer(raw))):
        try:
            obj = json.loads(m.group(1).strip())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _regex_fields(raw: str, latent_ids: Sequence[str]) -> dict:
    out: dict = {"latent_probs": {}}
    answers = re.findall(r"(?im)^[\s>*#-]*(?:final\s+)?answer\s*[:=]\s*\**\s*([^\s*,;]+)", raw)
    if answers:
        out["answer"] = answers[-1]
    for vid in latent_ids:
        hits = re.findall(
            rf"(?m)^[\s>*#-]*(?:P\(\s*)?{re.escape(vid)}\b[^\n:=]{{0,40}}[:=]\s*" + _NUMBER, raw
        )
        if hits:
            num, pct = hits[-1]
            out["latent_probs"][vid] = num + pct
    fin = re.findall(
        r"(?im)^[\s>*#-]*(?:final_prob|final\s+prob(?:ability)?|P\(\s*Y\s*\|\s*Z\s*\))\s*[:=]\s*" + _NUMBER, raw
    )
    if fin:
        out["final_prob"] = "".join(fin[-1])
    conf = re.findall(r"(?im)^[\s>*#-]*confidence\s*[:=]\s*" + _NUMBER, raw)
    if conf:
        out["confidence"] = "".join(conf[-1])
    return out


def parse_reply(raw: str, structure: PgmStructure | None = None) -> ParsedReply:
    """Extract answer and probabilities from a model reply.

    The last fenced JSON block wins; without one (or without an answer in
    it) ``answer:``/``Zi:`` lines are scraped instead. Probabilities are
    clamped into [0, 1] and each clamp is recorded in ``warnings``.
    """
    if not raw or not raw.strip():
        raise UnparseableReply("empty reply")
    latent_ids = structure.latent_ids if structure is not None else []
    fields = _from_json_block(raw)
    if fields is None or _normalize_label(fields.get("answer", fields.get("answer_label"))) is None:
        fields = _regex_fields(raw, latent_ids)
    label = _normalize_label(fields.get("answer", fields.get("answer_label")))
    if label is None:
        raise UnparseableReply(f"no answer label in reply: {raw[:80]!r}")

    warnings: list[str] = []
    latent: dict[str, float] = {}
    given = fields.get("latent_probs") or {}
    if not isinstance(given, dict):
        warnings.append("latent_probs is not an object; ignored")
        given = {}
    for vid, val in given.items():
        p = _coerce_prob(val, str(vid), warnings)
        if p is not None:
            latent[str(vid)] = p
    final = _coerce_prob(fields.get("final_prob"), "final_prob", warnings)
    conf = _coerce_prob(fields.get("confidence"), "confidence", warnings)
    if final is None and conf is not None:
        final = conf
        warnings.append("final_prob missing; verbalized confidence used")
    missing = [v for v in latent_ids if v not in latent]
    return ParsedReply(
        answer_label=label,
        latent_probs={k: latent[k] for k in sorted(latent)},
        final_prob=final,
        verbalized_confidence=conf,
        partial=bool(missing) or final is None,
        warnings=tuple(warnings),
        raw_text=raw,
    )
