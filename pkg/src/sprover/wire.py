"""One codec everywhere: canonical JSON serialization, digests, frames.

Every value that crosses a process boundary or lands in a compiled file goes
through this tagged, self-describing encoding.  Canonical bytes (sorted keys,
no whitespace) make digests and structural-equality comparisons meaningful.
Frames are 4-byte big-endian length prefixes followed by the body.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import fields
from typing import Any, Callable, Optional

SCHEMA_VERSION = 1

_TAG_KEY = "%t"

_CLASS_BY_TAG: dict[str, type] = {}
_TAG_BY_CLASS: dict[type, str] = {}
_CUSTOM_ENCODE: dict[type, Callable[[Any], dict]] = {}
_CUSTOM_DECODE: dict[str, Callable[[dict], Any]] = {}


class WireError(Exception):
    pass


def register(tag: str, cls: type,
             enc: Optional[Callable[[Any], dict]] = None,
             dec: Optional[Callable[[dict], Any]] = None) -> None:
    if tag in _CLASS_BY_TAG:
        raise ValueError(f"duplicate wire tag {tag}")
    _CLASS_BY_TAG[tag] = cls
    _TAG_BY_CLASS[cls] = tag
    if enc is not None:
        _CUSTOM_ENCODE[cls] = enc
    if dec is not None:
        _CUSTOM_DECODE[tag] = dec


def register_all(module, names: list[str], prefix: str) -> None:
    for name in names:
        register(f"{prefix}.{name}", getattr(module, name))


def encode(obj: Any) -> Any:
    """Encode to plain JSON-able data."""
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    if isinstance(obj, (list, tuple)):
        return [encode(x) for x in obj]
    cls = type(obj)
    tag = _TAG_BY_CLASS.get(cls)
    if tag is None:
        raise WireError(f"unregistered type {cls.__name__}")
    custom = _CUSTOM_ENCODE.get(cls)
    if custom is not None:
        body = custom(obj)
    else:
        body = {f.name: encode(getattr(obj, f.name)) for f in fields(obj)}
    body[_TAG_KEY] = tag
    return body


def decode(data: Any) -> Any:
    """Inverse of encode; JSON arrays come back as tuples."""
    if data is None or isinstance(data, (bool, int, float, str)):
        return data
    if isinstance(data, list):
        return tuple(decode(x) for x in data)
    if isinstance(data, dict):
        tag = data.get(_TAG_KEY)
        if tag is None:
            raise WireError("object without a type tag")
        custom = _CUSTOM_DECODE.get(tag)
        if custom is not None:
            return custom(data)
        cls = _CLASS_BY_TAG.get(tag)
        if cls is None:
            raise WireError(f"unknown type tag {tag}")
        kwargs = {k: decode(v) for k, v in data.items() if k != _TAG_KEY}
        return cls(**kwargs)
    raise WireError(f"cannot decode {type(data).__name__}")


def canon_bytes(obj: Any) -> bytes:
    return json.dumps(encode(obj), sort_keys=True,
                      separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def from_bytes(raw: bytes) -> Any:
    return decode(json.loads(raw.decode("utf-8")))


def digest(obj: Any) -> str:
    """Hex of the 32-byte hash of the canonical serialization."""
    return hashlib.sha256(canon_bytes(obj)).hexdigest()


def digest_bytes(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


# ---------------------------------------------------------------------------
# Framing

_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 30


def write_frame(sock, body: bytes) -> None:
    sock.sendall(_LEN.pack(len(body)) + body)


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise EOFError("channel closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> bytes:
    (length,) = _LEN.unpack(_recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise WireError(f"oversized frame ({length} bytes)")
    return _recv_exact(sock, length)


# ---------------------------------------------------------------------------
# Registrations for the core vocabulary.  Promises need custom handling: the
# run thunk is session-local and never crosses a channel; whoever decodes a
# still-pending promise cannot force it.

from . import kernel as _k  # noqa: E402

register_all(_k, ["Atom", "Truth", "Falsity", "Impl", "Conj", "Disj", "DefApp"], "f")
register_all(_k, ["Var", "Lam", "App", "Pair", "Fst", "Snd", "Inl", "Inr",
                  "Case", "TT", "Exfalso"], "t")
register_all(_k, ["Definition", "Axiom", "Environment", "ErrorReport"], "k")


def _encode_promise(p: _k.ProofPromise) -> dict:
    return {
        "statement": encode(p.statement),
        "base_key": p.base_key,
        "status": p.status,
        "term": encode(p.term),
        "error": encode(p.error),
    }


def _decode_promise(data: dict) -> _k.ProofPromise:
    promise = _k.ProofPromise(decode(data["statement"]), data["base_key"])
    if data["status"] == _k.FINISHED:
        promise.fulfill(decode(data["term"]))
    elif data["status"] == _k.FAILED:
        promise.reject(decode(data["error"]))
    return promise


register("k.ProofPromise", _k.ProofPromise, _encode_promise, _decode_promise)
register("k.PromiseCell", _k.PromiseCell,
         lambda c: {"promise": encode(c.current)},
         lambda d: _k.PromiseCell(decode(d["promise"])))
register("k.Opaque", _k.Opaque)

from . import engine as _e  # noqa: E402

register_all(_e, ["Intro", "Intros", "Apply", "Exact", "Split", "Left", "Right",
                  "Assumption", "Unfold", "Auto", "Idtac", "Fail", "ProofMarker",
                  "Par"], "tac")
register_all(_e, ["Goal", "HintDb", "Hole", "ProofState"], "e")

from . import vernac as _v  # noqa: E402

register_all(_v, ["Span", "DefinitionCmd", "AxiomCmd", "TheoremCmd", "HintCmd",
                  "TacticCmd", "QedCmd", "CheckCmd", "PrintCmd", "RequireCmd"], "c")
