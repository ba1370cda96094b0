"""Canonical JSON encoding shared by statements, checkpoints, and reports.

Canonical form: object keys sorted, no insignificant whitespace, UTF-8
text, no floats, byte fields carried as standard padded base64 strings.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
from typing import Any

DIGEST_SIZE = 32


class EncodingError(ValueError):
    """A value cannot be represented in, or parsed from, canonical form."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    if not isinstance(text, str):
        raise EncodingError(f"expected base64 string, got {type(text).__name__}")
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise EncodingError(f"invalid base64: {text!r}") from exc
    if b64e(raw) != text:
        raise EncodingError(f"non-canonical base64: {text!r}")
    return raw


def digest_from_b64(text: str, what: str = "digest") -> bytes:
    raw = b64d(text)
    if len(raw) != DIGEST_SIZE:
        raise EncodingError(f"{what} must be {DIGEST_SIZE} bytes, got {len(raw)}")
    return raw


def _check(value: Any, path: str) -> None:
    if value is None or isinstance(value, (bool, str)):
        if isinstance(value, str):
            try:
                value.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise EncodingError(f"{path}: text is not valid UTF-8") from exc
        return
    if isinstance(value, int):
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise EncodingError(f"{path}: object key {key!r} is not a string")
            _check(item, f"{path}.{key}")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    raise EncodingError(f"{path}: unrepresentable value of type {type(value).__name__}")


def canonical_json(obj: Any) -> bytes:
    _check(obj, "$")
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return text.encode("utf-8")


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise EncodingError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _no_float(text: str) -> Any:
    raise EncodingError(f"floating point value {text} not allowed")


def _no_constant(text: str) -> Any:
    raise EncodingError(f"constant {text} not allowed")


def parse_json(data: bytes | str) -> Any:
    """Parse JSON strictly: UTF-8 only, no duplicate keys, no floats."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError("payload is not UTF-8") from exc
    try:
        return json.loads(
            data,
            object_pairs_hook=_no_duplicates,
            parse_float=_no_float,
            parse_constant=_no_constant,
        )
    except json.JSONDecodeError as exc:
        raise EncodingError(f"malformed JSON: {exc}") from exc


def parse_canonical(data: bytes) -> Any:
    """Parse ``data`` and insist it is already in canonical form."""
    obj = parse_json(data)
    if canonical_json(obj) != data:
        raise EncodingError("non-canonical encoding")
    return obj
