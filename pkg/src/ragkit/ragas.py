"""LLM-judged RAG metrics computed over a stored QA log.

Four metrics are scored per logged interaction:

* context precision: one usefulness verdict per retrieved chunk, in rank
  order, aggregated by average precision;
* context recall: fraction of target-answer sentences the concatenated
  context supports;
* faithfulness: fraction of statements decomposed from the model answer
  that the concatenated context supports;
* answer relevance: mean cosine between the question and three reverse
  questions generated from the answer, floored at 0.

``ragas_overall`` is their arithmetic mean and is null whenever any
component is null.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

from .errors import JudgeParseError, PreconditionError
from .llmgw import (
    ChatRequest,
    Gateway,
    ProviderConfig,
    as_gateway,
    embedder_for,
    register_mock_task,
    task_tag,
)
from .ragflow import QaLogEntry, read_qa_log
from .textprep import clean_text, content_tokens, split_sentences
from .vecstore import cosine_similarity

log = logging.getLogger(__name__)

Judge = Callable[[str], str]
Embedder = Callable[[Sequence[str]], Sequence[Sequence[float]]]

METRICS = ("context_precision", "context_recall", "faithfulness", "answer_relevance")
ALL_METRICS = METRICS + ("ragas_overall",)
POLICIES = ("prefer_reference", "model_only")
REPROMPT_SUFFIX = "\n\nReply with only the structured object."
CONTEXT_JOINER = "\n\n"


@dataclass
class EvalConfig:
    seed: int = 42
    chat_model: str = "gpt-4o-mini"
    embedding_model: str = "text-embedding-3-small"
    target_answer_policy: str = "prefer_reference"
    workers: int = 1

    def __post_init__(self):
        if self.target_answer_policy not in POLICIES:
            raise PreconditionError(f"target_answer_policy must be one of {POLICIES}")
        if self.workers < 1:
            raise PreconditionError("workers must be >= 1")


@dataclass
class MetricsRow:
    qa_id: str
    context_precision: float | None = None
    context_recall: float | None = None
    faithfulness: float | None = None
    answer_relevance: float | None = None
    ragas_overall: float | None = None
    detail: dict[str, Any] = field(default_factory=dict)

    def scores(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in ALL_METRICS}


# judge prompts -------------------------------------------------------------

@dataclass(frozen=True)
class JudgeTask:
    task_tag: str
    rendered_prompt: str
    expected_schema: str


_VERDICT_SCHEMA = '{"verdict": 0 or 1}'
_INSTRUCTIONS = {
    "CP_VERDICT": ('Was the CONTEXT useful in arriving at the ANSWER to the QUESTION? '
                   'Reply with only a JSON object: {"verdict": 1} if useful, {"verdict": 0} if not.'),
    "CR_SENTENCE": ('Can the STATEMENT, taken from a reference answer, be attributed to the CONTEXT? '
                    'Reply with only a JSON object: {"verdict": 1} if supported, {"verdict": 0} if not.'),
    "FF_DECOMPOSE": ('Break the ANSWER into short, self-contained factual statements. '
                     'Reply with only a JSON object: {"statements": ["...", "..."]}.'),
    "FF_VERIFY": ('Can the STATEMENT be directly inferred from the CONTEXT? '
                  'Reply with only a JSON object: {"verdict": 1} if it can, {"verdict": 0} if not.'),
    "AR_REVERSE": ('Write three different questions that the ANSWER would directly answer. '
                   'Reply with only a JSON object: {"questions": ["...", "...", "..."]}.'),
}
_SECTIONS = {
    "CP_VERDICT": ("QUESTION", "ANSWER", "CONTEXT"),
    "CR_SENTENCE": ("CONTEXT", "STATEMENT"),
    "FF_DECOMPOSE": ("QUESTION", "ANSWER"),
    "FF_VERIFY": ("CONTEXT", "STATEMENT"),
    "AR_REVERSE": ("ANSWER",),
}
_SCHEMAS = {
    "CP_VERDICT": _VERDICT_SCHEMA,
    "CR_SENTENCE": _VERDICT_SCHEMA,
    "FF_DECOMPOSE": '{"statements": [string, ...]}',
    "FF_VERIFY": _VERDICT_SCHEMA,
    "AR_REVERSE": '{"questions": [string, string, string]}',
}


def render_task(tag: str, **sections: str) -> JudgeTask:
    parts = [f"TASK: {tag}"]
    for label in _SECTIONS[tag]:
        parts.append(f"{label}:\n{sections[label.lower()]}")
    parts.append(_INSTRUCTIONS[tag])
    return JudgeTask(tag, "\n\n".join(parts), _SCHEMAS[tag])


def parse_sections(prompt: str) -> dict[str, str]:
    """Recover the labelled sections of a rendered judge prompt."""
    tag = task_tag(prompt)
    if tag not in _SECTIONS:
        raise PreconditionError(f"not a judge prompt: {tag!r}")
    body = prompt.removesuffix(REPROMPT_SUFFIX).removesuffix("\n\n" + _INSTRUCTIONS[tag])
    labels = _SECTIONS[tag]
    body = body.partition("\n\n")[2].removeprefix(f"{labels[0]}:\n")
    out = {}
    for label, following in zip(labels, labels[1:]):
        out[label], _, body = body.partition(f"\n\n{following}:\n")
    out[labels[-1]] = body
    return out


def extract_object(reply: str) -> dict:
    """Parse the JSON object in ``reply``, ignoring any text around it."""
    start, end = reply.find("{"), reply.rfind("}")
    if start < 0 or end < start:
        raise JudgeParseError("no JSON object in judge reply")
    try:
        obj = json.loads(reply[start:end + 1])
    except ValueError as exc:
        raise JudgeParseError(f"judge reply is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise JudgeParseError("judge reply is not a JSON object")
    return obj


def _validate(tag: str, obj: dict):
    if _SCHEMAS[tag] == _VERDICT_SCHEMA:
        v = obj.get("verdict")
        if isinstance(v, bool):
            return int(v)
        if isinstance(v, str) and v.strip() in ("0", "1"):
            return int(v.strip())
        if isinstance(v, (int, float)) and v in (0, 1):
            return int(v)
        raise JudgeParseError(f"verdict must be 0 or 1, got {v!r}")
    key = "statements" if tag == "FF_DECOMPOSE" else "questions"
    items = obj.get(key)
    if not isinstance(items, list) or not all(isinstance(x, str) for x in items):
        raise JudgeParseError(f"{key} must be a list of strings")
    return [x.strip() for x in items if x.strip()]


def ask(judge: Judge, task: JudgeTask):
    """Send ``task`` to the judge and return the validated payload.

    One reprompt is made if the first reply cannot be parsed.
    """
    try:
        return _validate(task.task_tag, extract_object(judge(task.rendered_prompt)))
    except JudgeParseError as first:
        log.debug("unparseable %s reply (%s); reprompting", task.task_tag, first)
    return _validate(task.task_tag, extract_object(judge(task.rendered_prompt + REPROMPT_SUFFIX)))


# scores -----------------------------------------------------------------------

def average_precision(verdicts: Sequence[int]) -> float:
    """Mean of precision@k over the ranks k holding a relevant item; 0.0 if none."""
    hits = 0
    total = 0.0
    for k, v in enumerate(verdicts, 1):
        if v:
            hits += 1
            total += hits / k
    return total / hits if hits else 0.0


def target_answer(entry: QaLogEntry, policy: str = "prefer_reference") -> str:
    if policy == "prefer_reference" and entry.answer_reference and entry.answer_reference.strip():
        return entry.answer_reference
    return entry.answer_model or ""


def score_context_precision(entry: QaLogEntry, cfg: EvalConfig, judge: Judge) -> dict:
    target = target_answer(entry, cfg.target_answer_policy)
    verdicts = [
        ask(judge, render_task("CP_VERDICT", question=entry.question, answer=target, context=chunk))
        for chunk in entry.retrieved_texts
    ]
    return {"score": average_precision(verdicts), "verdicts": verdicts}


def score_context_recall(entry: QaLogEntry, cfg: EvalConfig, judge: Judge) -> dict:
    sentences = split_sentences(clean_text(target_answer(entry, cfg.target_answer_policy)))
    context = CONTEXT_JOINER.join(entry.retrieved_texts)
    verdicts = [ask(judge, render_task("CR_SENTENCE", context=context, statement=s)) for s in sentences]
    score = sum(verdicts) / len(verdicts) if verdicts else None
    return {"score": score, "sentences": sentences, "sentence_verdicts": verdicts}


def score_faithfulness(entry: QaLogEntry, cfg: EvalConfig, judge: Judge) -> dict:
    answer = entry.answer_model or ""
    if not answer.strip():
        return {"score": None, "statements": [], "statement_verdicts": []}
    statements = ask(judge, render_task("FF_DECOMPOSE", question=entry.question, answer=answer))
    context = CONTEXT_JOINER.join(entry.retrieved_texts)
    verdicts = [ask(judge, render_task("FF_VERIFY", context=context, statement=s)) for s in statements]
    score = sum(verdicts) / len(verdicts) if verdicts else None
    return {"score": score, "statements": statements, "statement_verdicts": verdicts}


def score_answer_relevance(entry: QaLogEntry, cfg: EvalConfig, judge: Judge, embedder: Embedder) -> dict:
    answer = entry.answer_model or ""
    if not answer.strip():
        return {"score": None, "reverse_questions": []}
    questions = ask(judge, render_task("AR_REVERSE", answer=answer))[:3]
    if not questions:
        return {"score": None, "reverse_questions": []}
    vectors = embedder([entry.question] + questions)
    sims = [cosine_similarity(vectors[0], v) for v in vectors[1:]]
    mean = sum(sims) / len(sims)
    return {"score": min(1.0, max(0.0, mean)), "reverse_questions": questions, "similarities": sims}


def evaluate_entry(entry: QaLogEntry, cfg: EvalConfig, judge: Judge, embedder: Embedder) -> MetricsRow:
    """Score one interaction. Parse failures null the affected metric only."""
    row = MetricsRow(qa_id=entry.qa_id)
    steps = {
        "context_precision": lambda: score_context_precision(entry, cfg, judge),
        "context_recall": lambda: score_context_recall(entry, cfg, judge),
        "faithfulness": lambda: score_faithfulness(entry, cfg, judge),
        "answer_relevance": lambda: score_answer_relevance(entry, cfg, judge, embedder),
    }
    failures = {}
    for metric, step in steps.items():
        try:
            result = step()
        except JudgeParseError as exc:
            failures[metric] = str(exc)
            continue
        setattr(row, metric, result.pop("score"))
        row.detail[metric] = result
    if failures:
        row.detail["failures"] = failures
    components = [getattr(row, m) for m in METRICS]
    if all(c is not None for c in components):
        row.ragas_overall = sum(components) / len(components)
    return row


def judge_for(gateway: Gateway, cfg: EvalConfig) -> Judge:
    def judge(prompt: str) -> str:
        return gateway.chat_complete(ChatRequest(user_prompt=prompt, temperature=0.0, seed=cfg.seed,
                                                 model=cfg.chat_model))
    return judge


def evaluate_entries(entries: Sequence[QaLogEntry], cfg: EvalConfig,
                     provider: ProviderConfig | Gateway) -> list[MetricsRow]:
    gateway = as_gateway(provider)
    judge = judge_for(gateway, cfg)
    embedder = embedder_for(gateway, cfg.embedding_model)

    def run(entry):
        return evaluate_entry(entry, cfg, judge, embedder)

    if cfg.workers == 1:
        return [run(e) for e in entries]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(run, entries))


def compute_ragas_metrics(log_path: str | os.PathLike, cfg: EvalConfig | None = None,
                          provider: ProviderConfig | Gateway | None = None) -> list[MetricsRow]:
    """One MetricsRow per log entry, in log order.

    Provider failures propagate; only unparseable judge replies turn into
    null metrics.
    """
    cfg = cfg or EvalConfig()
    return evaluate_entries(read_qa_log(log_path), cfg, provider or ProviderConfig())


# output files -------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("qa_id",) + ALL_METRICS)
        for row in rows:
            writer.writerow([row.qa_id] + [_fmt(getattr(row, m)) for m in ALL_METRICS])


def read_metrics_csv(path: str | os.PathLike) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            MetricsRow(qa_id=rec["qa_id"], **{m: float(rec[m]) if rec[m] != "" else None for m in ALL_METRICS})
            for rec in csv.DictReader(fh)
        ]


def write_metrics_detail(rows: Sequence[MetricsRow], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(json.dumps({"qa_id": row.qa_id, **row.detail}, ensure_ascii=False) + "\n" for row in rows)


# mock judge ---------------------------------------------------------------------

def _supported(target: str, context: str) -> int:
    return int(bool(content_tokens(target) & content_tokens(context)))


@register_mock_task("CP_VERDICT")
def _mock_cp(prompt: str) -> str:
    s = parse_sections(prompt)
    return json.dumps({"verdict": _supported(s["ANSWER"], s["CONTEXT"])})


@register_mock_task("CR_SENTENCE")
@register_mock_task("FF_VERIFY")
def _mock_verify(prompt: str) -> str:
    s = parse_sections(prompt)
    return json.dumps({"verdict": _supported(s["STATEMENT"], s["CONTEXT"])})


@register_mock_task("FF_DECOMPOSE")
def _mock_decompose(prompt: str) -> str:
    return json.dumps({"statements": split_sentences(clean_text(parse_sections(prompt)["ANSWER"]))})


_TRAILING_PUNCT = re.compile(r"[.?!]+$")


@register_mock_task("AR_REVERSE")
def _mock_reverse(prompt: str) -> str:
    sentences = split_sentences(clean_text(parse_sections(prompt)["ANSWER"]))
    if not sentences:
        return json.dumps({"questions": []})
    core = _TRAILING_PUNCT.sub("", sentences[0])
    return json.dumps({"questions": [f"{p}{core}?" for p in ("What is ", "Where is ", "Why is ")]})
