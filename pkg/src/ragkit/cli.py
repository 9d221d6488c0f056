"""Command-line entry point: ``ragkit <subcommand> ...``.

Exit status is 0 on success, 1 on a domain error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import PreconditionError, RagkitError
from .llmgw import ProviderConfig
from .ragas import (
    ALL_METRICS,
    EvalConfig,
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
from .reportkit import SweepConfig, correlate_against, run_chunk_sweep
from .service import ServiceConfig, serve
from .vecstore import open_store

DEFAULT_STORE = "ragkit_store"


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise PreconditionError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise PreconditionError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise PreconditionError(f"config file {path} must hold a JSON object")
    return data


def _pick(flag, section: dict, key: str, default=None):
    if flag is not None:
        return flag
    return section.get(key, default)


def _fields(cls, section: dict) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise PreconditionError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    return section


def _provider(args, conf: dict) -> ProviderConfig:
    section = _fields(ProviderConfig, dict(conf.get("provider", {})))
    overrides = {
        "kind": args.provider,
        "base_url": args.base_url,
        "api_key_env": args.api_key_env,
        "embedding_model": args.embedding_model,
        "chat_model": args.chat_model,
        "timeout": args.timeout,
        "max_retries": args.max_retries,
        "retry": False if args.no_retry else None,
    }
    section.update({k: v for k, v in overrides.items() if v is not None})
    return ProviderConfig(**section)


def _params(args, conf: dict, provider: ProviderConfig) -> RagParams:
    section = _fields(RagParams, dict(conf.get("default_params", {})))
    section.setdefault("embedding_model", provider.embedding_model)
    section.setdefault("chat_model", provider.chat_model)
    overrides = {
        "collection": getattr(args, "collection", None),
        "top_k": getattr(args, "top_k", None),
        "score_threshold": getattr(args, "score_threshold", None),
        "temperature": getattr(args, "temperature", None),
        "max_output_tokens": getattr(args, "max_output_tokens", None),
        "system_prompt": getattr(args, "system_prompt", None),
    }
    section.update({k: v for k, v in overrides.items() if v is not None})
    return RagParams(**section)


def _eval_cfg(args, conf: dict, provider: ProviderConfig) -> EvalConfig:
    section = _fields(EvalConfig, dict(conf.get("eval", {})))
    section.setdefault("chat_model", provider.chat_model)
    section.setdefault("embedding_model", provider.embedding_model)
    overrides = {
        "seed": getattr(args, "seed", None),
        "target_answer_policy": getattr(args, "policy", None),
        "workers": getattr(args, "workers", None),
    }
    section.update({k: v for k, v in overrides.items() if v is not None})
    return EvalConfig(**section)


def _emit(args, payload, text: str) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, indent=2))
    else:
        print(text)


def _fmt_score(v) -> str:
    return "-" if v is None else f"{v:.4f}"


# subcommands ------------------------------------------------------------------

def cmd_ingest(args, conf) -> int:
    provider = _provider(args, conf)
    overlap = args.chunk_overlap if args.chunk_overlap is not None else int(round(0.30 * args.chunk_size))
    with open_store(args.store, writable=True) as store:
        report = ingest_documents(
            args.paths, args.collection or "default", store=store, provider=provider,
            chunk_size=args.chunk_size, chunk_overlap=overlap, chunking_strategy=args.chunking_strategy,
            embedding_model=args.embedding_model or provider.embedding_model,
            embedding_batch_size=args.embedding_batch_size, embedding_max_chars=args.embedding_max_chars,
            resume=not args.no_resume, checkpoint_path=args.checkpoint_path,
            extractor_command=args.extractor_command or conf.get("extractor_command"), lossy=args.lossy)
    payload = dataclasses.asdict(report)
    lines = [f"{f['status']:8} {f['chunk_count']:6d}  {f['path']}" for f in report.per_file]
    lines.append(f"files processed: {report.files_processed}, chunks written: {report.chunks_written}, "
                 f"skipped: {report.chunks_skipped}, embedding batches: {report.embedding_batches}")
    _emit(args, payload, "\n".join(lines))
    return 1 if any(f["status"] == "failed" for f in report.per_file) else 0


def cmd_query(args, conf) -> int:
    provider = _provider(args, conf)
    params = _params(args, conf, provider)
    with open_store(args.store) as store:
        result = query_rag(args.question, params, store, provider)
    payload = result.to_dict()
    if args.log:
        entry = log_rag_interaction(args.log, args.question, result, params,
                                    answer_reference=args.answer_reference, qa_id=args.qa_id)
        payload["qa_id"] = entry.qa_id
    lines = [result.answer, ""]
    lines += [f"[{h.rank}] {h.score:+.4f}  {h.chunk_id}  {h.text[:60]!r}" for h in result.hits] or ["(no hits)"]
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_merge_refs(args, conf) -> int:
    outcome = merge_reference_answers(args.log, args.csv)
    text = f"updated {outcome['updated']}"
    if outcome["unmatched"]:
        text += f"; unmatched qa_ids: {', '.join(outcome['unmatched'])}"
    _emit(args, outcome, text)
    return 0


def cmd_eval(args, conf) -> int:
    provider = _provider(args, conf)
    rows = compute_ragas_metrics(args.log, _eval_cfg(args, conf, provider), provider)
    if args.out:
        write_metrics_csv(rows, args.out)
        write_metrics_detail(rows, args.detail or str(Path(args.out).with_suffix(".detail.jsonl")))
    payload = [{"qa_id": r.qa_id, **{m: getattr(r, m) for m in ALL_METRICS}} for r in rows]
    header = "qa_id".ljust(38) + "  ".join(m[:10].rjust(10) for m in ALL_METRICS)
    body = [r.qa_id.ljust(38) + "  ".join(_fmt_score(getattr(r, m)).rjust(10) for m in ALL_METRICS) for r in rows]
    _emit(args, payload, "\n".join([header] + body))
    return 0


def cmd_sweep(args, conf) -> int:
    provider = _provider(args, conf)
    sizes = [int(s) for s in args.chunk_sizes.split(",")] if args.chunk_sizes else [400, 800, 1600, 3200]
    cfg = SweepConfig(
        questions_path=args.questions, chunk_sizes=sizes, overlap_fraction=args.overlap_fraction,
        repeats=args.repeats, references_path=args.references,
        params=_params(args, conf, provider), eval=_eval_cfg(args, conf, provider))
    out = run_chunk_sweep(cfg, args.corpus, args.store, provider, artifact_root=args.artifacts)
    status = json.loads((out / "status.json").read_text(encoding="utf-8"))
    _emit(args, {"artifact_dir": str(out), "status": status}, f"artifacts written to {out}")
    return 1 if any(s["status"] != "ok" for s in status.values()) else 0


def cmd_correlate(args, conf) -> int:
    result = correlate_against(args.summary_a, args.summary_b, out_path=args.out)
    text = "\n".join(f"{m:20} {'-' if r is None else f'{r:.3f}'}" for m, r in result.items())
    _emit(args, result, text)
    return 0


def cmd_collections(args, conf) -> int:
    if args.delete:
        with open_store(args.store, writable=True) as store:
            existed = store.delete_collection(args.delete)
        _emit(args, {"deleted": existed}, f"deleted {args.delete}" if existed else f"no collection {args.delete}")
        return 0
    with open_store(args.store) as store:
        rows = store.list_collections()
    text = "\n".join(f"{c['name']:24} {c['record_count']:8d} dim={c['dimension']}" for c in rows) or "(empty)"
    _emit(args, rows, text)
    return 0


def cmd_serve(args, conf) -> int:
    provider = _provider(args, conf)
    cfg = ServiceConfig(
        store_root=args.store,
        bind_address=_pick(args.bind, conf, "bind_address", "127.0.0.1:8000"),
        provider=provider,
        default_params=_params(args, conf, provider),
        eval=_eval_cfg(args, conf, provider),
        max_request_bytes=conf.get("max_request_bytes", 1 << 20),
        log_root=_pick(args.log_root, conf, "log_root"),
        evaluate_parallelism=conf.get("evaluate_parallelism", 1),
    )
    serve(cfg)
    return 0


# parser -----------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config mirroring ServiceConfig/RagParams field names")
    p.add_argument("--store", help=f"vector store directory (default: ./{DEFAULT_STORE})")
    p.add_argument("--provider", choices=("mock", "remote"))
    p.add_argument("--base-url")
    p.add_argument("--api-key-env")
    p.add_argument("--embedding-model")
    p.add_argument("--chat-model")
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--no-retry", action="store_true")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="ragkit", description="Build and evaluate RAG pipelines.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="chunk, embed and store documents")
    p.add_argument("paths", nargs="+")
    p.add_argument("--collection")
    p.add_argument("--chunk-size", type=int, default=3200)
    p.add_argument("--chunk-overlap", type=int, help="default: round(0.30 * chunk size)")
    p.add_argument("--chunking-strategy", choices=("character", "sentence"), default="character")
    p.add_argument("--embedding-batch-size", type=int, default=128)
    p.add_argument("--embedding-max-chars", type=int, default=8000)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--checkpoint-path")
    p.add_argument("--extractor-command", help="command that prints a PDF's text: <command> <path>")
    p.add_argument("--lossy", action="store_true", help="replace undecodable bytes instead of failing")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", parents=[common], help="answer a question from a collection")
    p.add_argument("--question", required=True)
    p.add_argument("--collection")
    p.add_argument("--top-k", type=int)
    p.add_argument("--score-threshold", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-output-tokens", type=int)
    p.add_argument("--system-prompt")
    p.add_argument("--log", help="append the interaction to this QA log")
    p.add_argument("--answer-reference")
    p.add_argument("--qa-id")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("merge-refs", parents=[common], help="merge reference answers from CSV into a QA log")
    p.add_argument("--log", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_merge_refs)

    p = sub.add_parser("eval", parents=[common], help="score a QA log")
    p.add_argument("--log", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", choices=("prefer_reference", "model_only"))
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="metrics CSV path")
    p.add_argument("--detail", help="detail JSONL path (default: next to --out)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="run a chunk-size sweep")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--chunk-sizes", help="comma separated, default 400,800,1600,3200")
    p.add_argument("--overlap-fraction", type=float, default=0.30)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--references", help="qa_id,answer_reference CSV merged before scoring")
    p.add_argument("--artifacts", help="artifact root (default: <store>/sweeps)")
    p.add_argument("--top-k", type=int)
    p.add_argument("--score-threshold", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("correlate", parents=[common], help="Pearson r between two sweep summaries")
    p.add_argument("summary_a")
    p.add_argument("summary_b")
    p.add_argument("--out", help="write metric,correlation CSV here")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("collections", parents=[common], help="list or delete collections")
    p.add_argument("--delete", metavar="NAME")
    p.set_defaults(func=cmd_collections)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--bind", help="host:port (default 127.0.0.1:8000)")
    p.add_argument("--log-root", help="directory /evaluate may read logs from (default: store)")
    p.add_argument("--top-k", type=int)
    p.add_argument("--score-threshold", type=float)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = _load_config(args.config)
        args.store = args.store or conf.get("store_root") or DEFAULT_STORE
        return args.func(args, conf)
    except (RagkitError, OSError) as exc:
        name = type(exc).__name__
        print(f"error: {name}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
