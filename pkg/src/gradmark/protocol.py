"""Newline-delimited JSON prediction protocol.

Request:  ``{"id": <u64>, "input": [<f64>, ...]}``
Response: ``{"id": <u64>, "probs": [<f64>, ...]}`` or ``{"id": <u64>, "error": "<kind>"}``

Floats are written with 17 significant digits so every float64 survives a
round trip bit for bit. A line that is not valid JSON (or lacks an id) is
answered with ``{"error": "parse"}``.
"""

from __future__ import annotations

import json
import math

import numpy as np

U64_MAX = 2**64 - 1


class ProtocolError(ValueError):
    def __init__(self, kind: str, message: str = "", id: int | None = None):
        super().__init__(message or kind)
        self.kind = kind
        self.id = id


def format_float(v: float) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise ProtocolError("non-finite", f"cannot encode {v}")
    return "%.17g" % v


def _floats(values) -> str:
    return "[" + ",".join(format_float(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)) + "]"


def _check_id(id) -> int:
    if isinstance(id, bool) or not isinstance(id, int) or not 0 <= id <= U64_MAX:
        raise ProtocolError("parse", f"id must be an unsigned 64-bit integer, got {id!r}")
    return id


def encode_request(id: int, values) -> bytes:
    return f'{{"id":{_check_id(id)},"input":{_floats(values)}}}\n'.encode("ascii")


def encode_response(id: int, probs) -> bytes:
    return f'{{"id":{_check_id(id)},"probs":{_floats(probs)}}}\n'.encode("ascii")


def encode_error(id: int | None, kind: str) -> bytes:
    body = json.dumps(kind)
    if id is None:
        return f'{{"error":{body}}}\n'.encode("ascii")
    return f'{{"id":{_check_id(id)},"error":{body}}}\n'.encode("ascii")


def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


def _parse_int(text: str):
    # "%.17g" writes -0.0 as "-0", which must not collapse to the integer 0
    return -0.0 if text == "-0" else int(text)


def _load(line) -> dict:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("parse", str(exc)) from exc
    try:
        msg = json.loads(line, parse_constant=_reject_constant, parse_int=_parse_int)
    except ValueError as exc:
        raise ProtocolError("parse", str(exc)) from exc
    if not isinstance(msg, dict):
        raise ProtocolError("parse", "message must be a JSON object")
    return msg


def _float_array(values, field: str, id) -> np.ndarray:
    if not isinstance(values, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
    ):
        raise ProtocolError("schema", f"{field} must be an array of numbers", id)
    return np.asarray(values, dtype=np.float64)


def decode_request(line) -> tuple[int, np.ndarray]:
    msg = _load(line)
    if "id" not in msg:
        raise ProtocolError("parse", "missing id")
    id = _check_id(msg["id"])
    if "input" not in msg:
        raise ProtocolError("schema", "missing input", id)
    return id, _float_array(msg["input"], "input", id)


def decode_response(line) -> tuple[int | None, np.ndarray | None, str | None]:
    """-> (id, probs, error); exactly one of probs and error is set."""
    msg = _load(line)
    id = msg.get("id")
    if id is not None:
        id = _check_id(id)
    if "error" in msg:
        return id, None, str(msg["error"])
    if id is None or "probs" not in msg:
        raise ProtocolError("parse", "response needs id and probs or error")
    return id, _float_array(msg["probs"], "probs", id), None
