"""Task request/response types and their HTTP header encoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from deduplicator.errors import InputError
from deduplicator.lsh import as_feature_vector, signature_from_hex, signature_to_hex

H_TASK_ID = "X-Task-Id"
H_CLIENT_ID = "X-Client-Id"
H_THRESHOLD = "X-Sim-Threshold"
H_LSH = "X-LSH"
H_BUCKET = "X-Bucket"
H_EPOCH = "X-Epoch"
H_REUSED = "X-Reused"
H_SIMILARITY = "X-Similarity"
H_SERVED_BY = "X-Served-By"

FROM_SCRATCH = "from-scratch"
REUSED = "reused"


@dataclass(frozen=True)
class ResultValue:
    label: int
    produced_by: str = FROM_SCRATCH


@dataclass
class TaskRequest:
    task_id: str
    service: str
    threshold: float
    payload: np.ndarray
    client_id: str = ""
    precomputed_signature: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise InputError(f"threshold {self.threshold} outside [0, 1]")


@dataclass
class TaskResponse:
    task_id: str
    result: ResultValue | None
    reused: bool = False
    similarity: float | None = None
    headers: dict[str, str] = field(default_factory=dict)
    server: str | None = None
    status: int = 200
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == 200


def header(headers: Mapping[str, str], name: str, default: str | None = None) -> str | None:
    """Case-insensitive header lookup."""
    value = headers.get(name)
    if value is not None:
        return value
    lowered = name.lower()
    for k, v in headers.items():
        if k.lower() == lowered:
            return v
    return default


def decode_payload(body: bytes, dim: int | None) -> np.ndarray:
    """Parse a JSON array of reals; trailing whitespace padding is allowed."""
    try:
        values = json.loads(body.rstrip())
    except (ValueError, UnicodeDecodeError) as exc:
        raise InputError(f"body is not a JSON array: {exc}") from None
    if not isinstance(values, list):
        raise InputError("body is not a JSON array")
    return as_feature_vector(values, dim)


def encode_payload(vector: np.ndarray, pad_to: int = 0) -> bytes:
    body = json.dumps([float(x) for x in vector]).encode()
    if pad_to > len(body):
        body += b" " * (pad_to - len(body))
    return body


def request_headers(req: TaskRequest, bits: int | None = None) -> dict[str, str]:
    headers = {H_TASK_ID: req.task_id, H_CLIENT_ID: req.client_id, H_THRESHOLD: repr(req.threshold)}
    if req.precomputed_signature is not None and bits is not None:
        headers[H_LSH] = signature_to_hex(req.precomputed_signature, bits)
    return headers


def parse_request(
    service: str, headers: Mapping[str, str], body: bytes, dim: int | None, bits: int
) -> TaskRequest:
    raw = header(headers, H_THRESHOLD)
    if raw is None:
        raise InputError(f"missing {H_THRESHOLD}")
    try:
        threshold = float(raw)
    except ValueError:
        raise InputError(f"malformed {H_THRESHOLD}: {raw!r}") from None
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold {threshold} outside [0, 1]")
    lsh = header(headers, H_LSH)
    return TaskRequest(
        task_id=header(headers, H_TASK_ID, "") or "",
        service=service,
        threshold=threshold,
        payload=decode_payload(body, dim),
        client_id=header(headers, H_CLIENT_ID, "") or "",
        precomputed_signature=signature_from_hex(lsh, bits) if lsh else None,
    )


def response_body(resp: TaskResponse) -> bytes:
    doc = {"task_id": resp.task_id}
    if resp.result is not None:
        doc["label"] = resp.result.label
        doc["produced_by"] = resp.result.produced_by
    if resp.error:
        doc["error"] = resp.error
    return json.dumps(doc).encode()


def response_headers(resp: TaskResponse) -> dict[str, str]:
    headers = dict(resp.headers)
    headers[H_REUSED] = "1" if resp.reused else "0"
    if resp.similarity is not None:
        headers[H_SIMILARITY] = repr(resp.similarity)
    return headers


def parse_response(status: int, headers: Mapping[str, str], body: bytes) -> TaskResponse:
    try:
        doc = json.loads(body) if body else {}
    except ValueError:
        doc = {"error": body.decode(errors="replace")}
    result = None
    if "label" in doc:
        result = ResultValue(int(doc["label"]), doc.get("produced_by", FROM_SCRATCH))
    sim = header(headers, H_SIMILARITY)
    return TaskResponse(
        task_id=doc.get("task_id", ""),
        result=result,
        reused=header(headers, H_REUSED) == "1",
        similarity=float(sim) if sim is not None else None,
        headers=dict(headers),
        status=status,
        error=doc.get("error"),
    )
