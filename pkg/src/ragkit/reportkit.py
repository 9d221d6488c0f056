"""Chunk-size sweeps, repeat summaries and cross-implementation correlation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    DegenerateSeries,
    MismatchedGrids,
    MissingFile,
    PreconditionError,
    RagkitError,
)
from .llmgw import Gateway, ProviderConfig, as_gateway
from .ragas import (
    ALL_METRICS,
    EvalConfig,
    MetricsRow,
    compute_ragas_metrics,
    write_metrics_csv,
    write_metrics_detail,
)
from .ragflow import (
    RagParams,
    ingest_documents,
    log_rag_interaction,
    merge_reference_answers,
    query_rag,
)
from .vecstore import open_store

log = logging.getLogger(__name__)

SUMMARY_HEADER = ("chunk_size", "metric", "mean", "sd", "n")


@dataclass
class SweepConfig:
    questions_path: str
    chunk_sizes: list[int] = field(default_factory=lambda: [400, 800, 1600, 3200])
    overlap_fraction: float = 0.30
    repeats: int = 3
    chunking_strategy: str = "character"
    embedding_batch_size: int = 128
    embedding_max_chars: int = 8000
    references_path: str | None = None
    params: RagParams = field(default_factory=RagParams)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        sizes = list(self.chunk_sizes)
        if not sizes or any(s <= 0 for s in sizes) or any(a >= b for a, b in zip(sizes, sizes[1:])):
            raise PreconditionError("chunk_sizes must be positive and strictly increasing")
        if not 0 <= self.overlap_fraction < 1:
            raise PreconditionError("overlap_fraction must be in [0, 1)")
        if self.repeats < 1:
            raise PreconditionError("repeats must be >= 1")

    def overlap_for(self, chunk_size: int) -> int:
        return int(round(self.overlap_fraction * chunk_size))


@dataclass
class MetricSummary:
    chunk_size: int | None
    metric: str
    mean: float | None
    sd: float | None
    n: int
    nulls: int = 0


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    if len(x) != len(y):
        raise PreconditionError(f"series lengths differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DegenerateSeries("need at least two points")
    mx, my = math.fsum(x) / len(x), math.fsum(y) / len(y)
    dx = [a - mx for a in x]
    dy = [b - my for b in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSeries("constant series has no correlation")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def summarize_runs(rows_per_run: Sequence[Sequence[MetricsRow]],
                   chunk_size: int | None = None) -> list[MetricSummary]:
    """Pool every non-null score across entries and runs; mean and sample sd per metric."""
    if not rows_per_run:
        raise PreconditionError("summarize_runs needs at least one run")
    out = []
    for metric in ALL_METRICS:
        values = [getattr(r, metric) for run in rows_per_run for r in run]
        present = [v for v in values if v is not None]
        if not present:
            out.append(MetricSummary(chunk_size, metric, None, None, 0, len(values)))
            continue
        sd = statistics.stdev(present) if len(present) > 1 else 0.0
        out.append(MetricSummary(chunk_size, metric, statistics.fmean(present), sd, len(present),
                                 len(values) - len(present)))
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_summary_csv(summaries: Sequence[MetricSummary], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for s in summaries:
            writer.writerow([_fmt(s.chunk_size), s.metric, _fmt(s.mean), _fmt(s.sd), s.n])


def read_summary_csv(path: str | os.PathLike) -> list[MetricSummary]:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"no such summary: {p}")
    with open(p, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_HEADER:
            raise PreconditionError(f"{p} does not have header {','.join(SUMMARY_HEADER)}")
        return [
            MetricSummary(
                chunk_size=int(rec["chunk_size"]) if rec["chunk_size"] else None,
                metric=rec["metric"],
                mean=float(rec["mean"]) if rec["mean"] else None,
                sd=float(rec["sd"]) if rec["sd"] else None,
                n=int(rec["n"]),
            )
            for rec in reader
        ]


def _grid(summaries: Sequence[MetricSummary]) -> dict[str, dict[int, float | None]]:
    grid: dict[str, dict[int, float | None]] = {}
    for s in summaries:
        grid.setdefault(s.metric, {})[s.chunk_size] = s.mean
    return grid


def correlate_against(summary_a: str | os.PathLike, summary_b: str | os.PathLike,
                      out_path: str | os.PathLike | None = None) -> dict[str, float | None]:
    """Per-metric Pearson r between two summaries' mean series over chunk size.

    Metrics whose series is constant or has missing means get None.
    """
    a, b = _grid(read_summary_csv(summary_a)), _grid(read_summary_csv(summary_b))
    if set(a) != set(b):
        raise MismatchedGrids(f"metric sets differ: {sorted(set(a) ^ set(b))}")
    result: dict[str, float | None] = {}
    for metric in (m for m in ALL_METRICS if m in a):
        if set(a[metric]) != set(b[metric]):
            raise MismatchedGrids(
                f"{metric}: chunk sizes {sorted(a[metric], key=str)} vs {sorted(b[metric], key=str)}")
        sizes = sorted(a[metric], key=lambda s: (s is None, s))
        xs, ys = [a[metric][s] for s in sizes], [b[metric][s] for s in sizes]
        try:
            if any(v is None for v in xs + ys):
                raise DegenerateSeries("missing mean")
            result[metric] = pearson(xs, ys)
        except DegenerateSeries as exc:
            log.info("no correlation for %s: %s", metric, exc)
            result[metric] = None
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("metric", "correlation"))
            for metric, r in result.items():
                writer.writerow((metric, _fmt(r)))
    return result


def read_questions(path: str | os.PathLike) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"no such questions file: {p}")
    lines = p.read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def _new_artifact_dir(root: Path) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    candidate = root / f"sweep-{stamp}"
    n = 1
    while candidate.exists():
        n += 1
        candidate = root / f"sweep-{stamp}-{n}"
    candidate.mkdir(parents=True)
    return candidate


def run_chunk_sweep(cfg: SweepConfig, corpus_paths: Sequence[str | os.PathLike], store_root: str | os.PathLike,
                    provider: ProviderConfig | Gateway, artifact_root: str | os.PathLike | None = None) -> Path:
    """Ingest, query and score the corpus once per chunk size.

    Each size gets collection ``sweep_<size>``, one QA log, ``cfg.repeats``
    metric CSVs, and contributes rows to ``summary.csv``. A size whose
    ingestion fails is recorded in ``status.json`` and the sweep moves on.
    Returns the artifact directory.
    """
    questions = read_questions(cfg.questions_path)
    if not questions:
        raise PreconditionError(f"{cfg.questions_path} contains no questions")
    if not corpus_paths:
        raise PreconditionError("corpus_paths is empty")
    missing = [str(p) for p in corpus_paths if not Path(p).is_file()]
    if missing:
        raise MissingFile(f"corpus files not found: {', '.join(missing)}")

    gateway = as_gateway(provider)
    out = _new_artifact_dir(Path(artifact_root) if artifact_root else Path(store_root) / "sweeps")
    resolved = {
        **asdict(cfg),
        "overlaps": {str(s): cfg.overlap_for(s) for s in cfg.chunk_sizes},
        "corpus_paths": [os.path.abspath(p) for p in corpus_paths],
        "store_root": os.path.abspath(store_root),
        "provider": asdict(gateway.config),
    }
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    status: dict[str, dict] = {}
    summaries: list[MetricSummary] = []
    with open_store(store_root, writable=True) as store:
        for size in cfg.chunk_sizes:
            size_dir = out / f"size_{size}"
            size_dir.mkdir()
            collection = f"sweep_{size}"
            try:
                report = ingest_documents(
                    corpus_paths, collection, store=store, provider=gateway, chunk_size=size,
                    chunk_overlap=cfg.overlap_for(size), chunking_strategy=cfg.chunking_strategy,
                    embedding_model=cfg.params.embedding_model, embedding_batch_size=cfg.embedding_batch_size,
                    embedding_max_chars=cfg.embedding_max_chars)
                if all(f["status"] == "failed" for f in report.per_file):
                    raise RagkitError("every corpus file failed to ingest")
            except RagkitError as exc:
                log.warning("chunk size %d aborted: %s", size, exc)
                status[str(size)] = {"status": "failed", "error": str(exc)}
                continue
            (size_dir / "ingest.json").write_text(json.dumps(asdict(report), indent=2) + "\n", encoding="utf-8")

            params = RagParams(**{**asdict(cfg.params), "collection": collection})
            log_path = size_dir / "qa_log.jsonl"
            for i, question in enumerate(questions, 1):
                result = query_rag(question, params, store, gateway)
                log_rag_interaction(log_path, question, result, params, qa_id=f"q{i:03d}")
            if cfg.references_path:
                merge_reference_answers(log_path, cfg.references_path)

            runs = []
            for rep in range(1, cfg.repeats + 1):
                rows = compute_ragas_metrics(log_path, cfg.eval, gateway)
                write_metrics_csv(rows, size_dir / f"metrics_run{rep}.csv")
                write_metrics_detail(rows, size_dir / f"metrics_run{rep}.detail.jsonl")
                runs.append(rows)
            summaries.extend(summarize_runs(runs, chunk_size=size))
            status[str(size)] = {"status": "ok", "chunks": sum(f["chunk_count"] for f in report.per_file),
                                 "questions": len(questions)}

    write_summary_csv(summaries, out / "summary.csv")
    (out / "status.json").write_text(json.dumps(status, indent=2) + "\n", encoding="utf-8")
    return out
