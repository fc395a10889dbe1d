"""Bounded-concurrency batch execution with retries and an append-only checkpoint."""

import asyncio
import logging
import os
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional

from pydantic import ValidationError
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential
from tqdm import tqdm

from app.errors import (
    CheckpointCorruptError,
    ConfigurationError,
    NonRetryableBackendError,
    ResponseParseError,
    RetryableBackendError,
)
from app.jsonl import append_jsonl
from app.models import BackendSpec, GenerationRecord, GenerationRequest
from app.services import TextBackend, build_backend
from app.transcript import parse_for_request

logger = logging.getLogger(__name__)

Parser = Callable[[GenerationRequest, str], object]


def _now() -> datetime:
    return datetime.now(timezone.utc)


# ===========================================================================
# CHECKPOINT
# ===========================================================================


def load_checkpoint(path: str) -> Dict[str, GenerationRecord]:
    """Latest record per request_id.

    An unterminated final line is a write cut short by a crash and is skipped.
    Any other unreadable line is fatal.
    """
    records: Dict[str, GenerationRecord] = {}
    if not os.path.exists(path):
        return records
    with open(path, "rb") as f:
        lines = f.readlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = GenerationRecord.model_validate_json(line)
        except ValidationError as e:
            if lineno == len(lines) and not line.endswith(b"\n"):
                logger.warning("%s:%d: skipping truncated final record", path, lineno)
                continue
            raise CheckpointCorruptError(path, lineno, str(e.errors()[0]["msg"])) from e
        prev = records.get(rec.request_id)
        if prev is None or prev.status != "ok":
            records[rec.request_id] = rec
    return records


def load_records(path: str) -> List[GenerationRecord]:
    return list(load_checkpoint(path).values())


def seal_checkpoint(path: str) -> None:
    """Terminate or drop an unterminated final line so appends start on a fresh line."""
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return
    with open(path, "rb+") as f:
        data = f.read()
        if data.endswith(b"\n"):
            return
        cut = data.rfind(b"\n") + 1
        try:
            GenerationRecord.model_validate_json(data[cut:])
            f.write(b"\n")
        except ValidationError:
            f.truncate(cut)
            logger.warning("%s: dropped %d bytes of a truncated final record", path, len(data) - cut)


class CheckpointWriter:
    def __init__(self, path: str):
        self.path = path
        self._lock = asyncio.Lock()
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        seal_checkpoint(path)

    async def write(self, record: GenerationRecord) -> None:
        async with self._lock:
            await asyncio.to_thread(append_jsonl, self.path, record.model_dump(mode="json"))


# ===========================================================================
# EXECUTION
# ===========================================================================


async def _execute_one(
    request: GenerationRequest,
    backend: TextBackend,
    spec: BackendSpec,
    semaphore: asyncio.Semaphore,
    parser: Parser,
) -> GenerationRecord:
    policy = spec.retry
    retry_on = (RetryableBackendError, ResponseParseError) if policy.retry_on_parse_failure else (RetryableBackendError,)
    started = _now()
    attempts = 0
    raw = ""

    def record(status: str, parsed=None, reason: Optional[str] = None) -> GenerationRecord:
        return GenerationRecord(
            request_id=request.request_id,
            backend=backend.name,
            raw_response=raw,
            parsed=parsed,
            status=status,
            reason=reason,
            attempts=attempts,
            started_at=started,
            finished_at=_now(),
            request=request,
        )

    retrying = AsyncRetrying(
        stop=stop_after_attempt(policy.max_attempts),
        wait=wait_exponential(multiplier=policy.backoff_base, max=policy.backoff_cap),
        retry=retry_if_exception_type(retry_on),
        reraise=True,
    )
    try:
        async for attempt in retrying:
            with attempt:
                attempts = attempt.retry_state.attempt_number
                raw = ""
                async with semaphore:
                    raw = await backend.complete(request)
                parsed = parser(request, raw)
        return record("ok", parsed=parsed)
    except ResponseParseError as e:
        logger.warning("%s: parse failed after %d attempt(s): %s", request.request_id, attempts, e)
        return record("parse_failed", reason=e.reason)
    except RetryableBackendError as e:
        logger.warning("%s: retries exhausted after %d attempt(s): %s", request.request_id, attempts, e)
        return record("exhausted_retries", reason=str(e))
    except NonRetryableBackendError as e:
        logger.error("%s: backend failed: %s", request.request_id, e)
        return record("backend_failed", reason=str(e))
    except ConfigurationError:
        raise
    except Exception as e:
        logger.exception("%s: unexpected backend error", request.request_id)
        return record("backend_failed", reason=f"{type(e).__name__}: {e}")


async def run_batch_async(
    requests: List[GenerationRequest],
    spec: BackendSpec,
    checkpoint_path: str,
    backend: Optional[TextBackend] = None,
    parser: Optional[Parser] = None,
    progress: bool = True,
    seed: int = 0,
) -> List[GenerationRecord]:
    ids = [r.request_id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("request ids must be unique within a batch")

    done = {rid: rec for rid, rec in load_checkpoint(checkpoint_path).items() if rec.status == "ok"}
    pending = [r for r in requests if r.request_id not in done]
    if done:
        logger.info("Resuming: %d of %d requests already completed", len(requests) - len(pending), len(requests))

    own_backend = backend is None
    backend = backend or build_backend(spec, seed=seed)
    writer = CheckpointWriter(checkpoint_path)
    semaphore = asyncio.Semaphore(spec.max_concurrency)
    parser = parser or parse_for_request
    results: Dict[str, GenerationRecord] = dict(done)

    bar = tqdm(total=len(pending), desc=spec.name, disable=not progress)

    async def worker(req: GenerationRequest) -> None:
        rec = await _execute_one(req, backend, spec, semaphore, parser)
        await writer.write(rec)
        results[req.request_id] = rec
        bar.update(1)

    try:
        await asyncio.gather(*(worker(r) for r in pending))
    finally:
        bar.close()
        if own_backend:
            await backend.aclose()

    failed = sum(1 for rid in ids if results[rid].status != "ok")
    if failed:
        logger.warning("%s: %d of %d requests did not succeed", spec.name, failed, len(requests))
    return [results[rid] for rid in ids]


def run_batch(
    requests: List[GenerationRequest],
    spec: BackendSpec,
    checkpoint_path: str,
    backend: Optional[TextBackend] = None,
    parser: Optional[Parser] = None,
    progress: bool = True,
    seed: int = 0,
) -> List[GenerationRecord]:
    return asyncio.run(run_batch_async(requests, spec, checkpoint_path, backend, parser, progress, seed))
