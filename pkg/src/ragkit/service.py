"""HTTP JSON service exposing grounded query and log evaluation.

Endpoints::

    GET  /healthz       -> {"status": "ok"}
    GET  /collections   -> [{"name", "record_count", "dimension"}, ...]
    POST /query         {question, collection?, top_k?, score_threshold?, system_prompt?}
    POST /evaluate      {qa_log_path, seed?}

Every failure is answered with ``{"error": <code>, "message": <text>}`` where
``code`` is one of :data:`ERROR_CODES`.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from starlette.concurrency import run_in_threadpool
from starlette.exceptions import HTTPException as StarletteHTTPException

from .errors import (
    AuthMissing,
    BindFailure,
    MalformedLog,
    MissingFile,
    MockUnknownTask,
    PreconditionError,
    ProviderError,
    UnknownCollection,
)
from .llmgw import Gateway, ProviderConfig
from .ragas import ALL_METRICS, EvalConfig, compute_ragas_metrics
from .ragflow import RagParams, query_rag
from .vecstore import open_store

log = logging.getLogger(__name__)

ERROR_CODES = {
    "invalid_request": 400,
    "malformed_log": 400,
    "path_not_allowed": 400,
    "unknown_collection": 404,
    "log_not_found": 404,
    "not_found": 404,
    "method_not_allowed": 405,
    "payload_too_large": 413,
    "provider_error": 502,
    "internal_error": 500,
}


@dataclass
class ServiceConfig:
    store_root: str
    bind_address: str = "127.0.0.1:8000"
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    default_params: RagParams = field(default_factory=RagParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    max_request_bytes: int = 1 << 20
    log_root: str | None = None
    evaluate_parallelism: int = 1

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.bind_address.rpartition(":")
        if not host or not port.isdigit():
            raise PreconditionError(f"bind_address must look like host:port, got {self.bind_address!r}")
        return host, int(port)


class QueryBody(BaseModel):
    model_config = ConfigDict(extra="forbid")

    question: str = Field(min_length=1)
    collection: str | None = None
    top_k: int | None = Field(default=None, gt=0)
    score_threshold: float | None = None
    system_prompt: str | None = None


class EvaluateBody(BaseModel):
    model_config = ConfigDict(extra="forbid")

    qa_log_path: str = Field(min_length=1)
    seed: int | None = None


class ApiError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _error(code: str, message: str) -> JSONResponse:
    return JSONResponse({"error": code, "message": message}, status_code=ERROR_CODES[code])


async def _json_body(request: Request, model: type[BaseModel], limit: int) -> BaseModel:
    declared = request.headers.get("content-length")
    if declared and declared.isdigit() and int(declared) > limit:
        raise ApiError("payload_too_large", f"request body exceeds {limit} bytes")
    raw = await request.body()
    if len(raw) > limit:
        raise ApiError("payload_too_large", f"request body exceeds {limit} bytes")
    try:
        data = json.loads(raw or b"null")
    except ValueError as exc:
        raise ApiError("invalid_request", f"body is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ApiError("invalid_request", "body must be a JSON object")
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        details = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise ApiError("invalid_request", details) from exc


def _resolve_log(path: str, root: Path) -> Path:
    candidate = Path(path)
    if not candidate.is_absolute():
        candidate = root / candidate
    resolved = Path(os.path.realpath(candidate))
    if resolved != root and root not in resolved.parents:
        raise ApiError("path_not_allowed", f"{path} is outside the allowed log root")
    return resolved


def create_app(cfg: ServiceConfig, gateway: Gateway | None = None) -> FastAPI:
    """Build the application. The store is opened read-only once, at creation."""
    if not Path(cfg.store_root).is_dir():
        raise MissingFile(f"store root {cfg.store_root} does not exist")
    store = open_store(cfg.store_root)
    gateway = gateway or Gateway(cfg.provider)
    log_root = Path(os.path.realpath(cfg.log_root or cfg.store_root))
    eval_slots = threading.BoundedSemaphore(cfg.evaluate_parallelism)

    app = FastAPI(title="ragkit", version="0.1.0")
    app.state.store = store

    @app.exception_handler(ApiError)
    async def _api_error(request, exc: ApiError):
        return _error(exc.code, exc.message)

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(request, exc: StarletteHTTPException):
        code = {404: "not_found", 405: "method_not_allowed"}.get(exc.status_code, "invalid_request")
        return _error(code, str(exc.detail))

    @app.exception_handler(Exception)
    async def _unexpected(request, exc: Exception):
        log.exception("unhandled error")
        return _error("internal_error", f"{type(exc).__name__}: {exc}")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/collections")
    def collections():
        return store.list_collections()

    @app.post("/query")
    async def query(request: Request):
        body = await _json_body(request, QueryBody, cfg.max_request_bytes)
        overrides = {k: v for k, v in body.model_dump().items() if k != "question" and v is not None}
        params = dataclasses.replace(cfg.default_params, **overrides)
        try:
            result = await run_in_threadpool(query_rag, body.question, params, store, gateway)
        except UnknownCollection as exc:
            raise ApiError("unknown_collection", str(exc)) from exc
        except (ProviderError, AuthMissing, MockUnknownTask) as exc:
            raise ApiError("provider_error", str(exc)) from exc
        except PreconditionError as exc:
            raise ApiError("invalid_request", str(exc)) from exc
        return result.to_dict()

    @app.post("/evaluate")
    async def evaluate(request: Request):
        body = await _json_body(request, EvaluateBody, cfg.max_request_bytes)
        path = _resolve_log(body.qa_log_path, log_root)
        eval_cfg = cfg.eval if body.seed is None else dataclasses.replace(cfg.eval, seed=body.seed)

        def run():
            with eval_slots:
                return compute_ragas_metrics(path, eval_cfg, gateway)

        try:
            rows = await run_in_threadpool(run)
        except MissingFile as exc:
            raise ApiError("log_not_found", str(exc)) from exc
        except MalformedLog as exc:
            raise ApiError("malformed_log", str(exc)) from exc
        except (ProviderError, AuthMissing, MockUnknownTask) as exc:
            raise ApiError("provider_error", str(exc)) from exc
        return {"rows": [{"qa_id": r.qa_id, **{m: getattr(r, m) for m in ALL_METRICS}} for r in rows]}

    return app


def serve(cfg: ServiceConfig, gateway: Gateway | None = None) -> None:
    """Run the service in the foreground until interrupted."""
    import uvicorn

    host, port = cfg.host_port()
    try:
        with socket.create_server((host, port)):
            pass
    except OSError as exc:
        raise BindFailure(f"cannot bind {cfg.bind_address}: {exc}") from exc
    uvicorn.run(create_app(cfg, gateway), host=host, port=port, log_level="info")
