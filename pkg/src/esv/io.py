"""File formats: feature files, model documents, result documents and run manifests.

Feature files come in two flavours, sniffed by their first bytes:

* text: ``#`` comment lines, then a header ``n,D`` (or ``n,D,t`` when each row
  starts with a timestamp), then ``n`` comma-separated rows;
* binary: magic ``ESVF``, little-endian ``uint32`` version (1), n, D, flags
  (bit 0 = timestamps present), then ``n`` float64 timestamps if flagged, then
  ``n * D`` float64 values in row-major order.

Model and result documents are JSON. Floats are written with ``repr``, the
shortest decimal string that reads back to the same double (never more than
17 significant digits), so a write/read round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from esv.engine import AttributionResult
from esv.errors import FileFormatError, ValidationError
from esv.models import ModelSpec, spec_from_dict, spec_to_dict
from esv.sequence import FeatureSequence

RESULT_FORMAT = "esv-result/1"
MANIFEST_FORMAT = "esv-manifest/1"
ESVF_MAGIC = b"ESVF"
ESVF_VERSION = 1
_ESVF_HEADER = struct.Struct("<4sIIII")


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory and rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# features


def read_features(path) -> FeatureSequence:
    raw = _read_bytes(path)
    if raw[:4] == ESVF_MAGIC:
        return _parse_esvf(raw, path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ValidationError(f"{path}: neither an ESVF binary nor UTF-8 text") from None
    return _parse_feature_text(text, path)


def _parse_feature_text(text: str, path) -> FeatureSequence:
    lines = [(k + 1, ln.strip()) for k, ln in enumerate(text.splitlines())]
    lines = [(k, ln) for k, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ValidationError(f"{path}: empty feature file")
    lineno, header = lines[0]
    fields = [f.strip() for f in header.split(",")]
    if len(fields) not in (2, 3) or (len(fields) == 3 and fields[2] != "t"):
        raise ValidationError(f"{path}:{lineno}: header must be 'n,D' or 'n,D,t'")
    try:
        n, D = int(fields[0]), int(fields[1])
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: header values must be integers") from None
    stamped = len(fields) == 3
    rows = lines[1:]
    if len(rows) != n:
        raise ValidationError(f"{path}: header declares n={n} rows, found {len(rows)}")
    width = D + stamped
    values = np.empty((n, width))
    for r, (lineno, line) in enumerate(rows):
        cells = line.split(",")
        if len(cells) != width:
            raise ValidationError(f"{path}:{lineno}: expected {width} columns, found {len(cells)}")
        for col, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: {cell.strip()!r} is not a number") from None
            if not math.isfinite(v):
                raise ValidationError(f"{path}:{lineno}: non-finite value {cell.strip()!r}")
            values[r, col] = v
    if stamped:
        return FeatureSequence(values[:, 1:], timestamps=values[:, 0])
    return FeatureSequence(values)


def _parse_esvf(raw: bytes, path) -> FeatureSequence:
    if len(raw) < _ESVF_HEADER.size:
        raise ValidationError(f"{path}: truncated ESVF header")
    _, version, n, D, flags = _ESVF_HEADER.unpack_from(raw)
    if version != ESVF_VERSION:
        raise ValidationError(f"{path}: unsupported ESVF version {version}")
    stamped = bool(flags & 1)
    expected = _ESVF_HEADER.size + 8 * (n * D + (n if stamped else 0))
    if len(raw) != expected:
        raise ValidationError(f"{path}: ESVF size {len(raw)} bytes, header implies {expected}")
    body = np.frombuffer(raw, dtype="<f8", offset=_ESVF_HEADER.size)
    ts = None
    if stamped:
        ts, body = body[:n], body[n:]
    values = body.reshape(n, D)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{path}: non-finite feature values")
    return FeatureSequence(values, timestamps=ts)


def write_features(path, X: FeatureSequence, binary: bool = False) -> None:
    stamped = X.timestamps is not None
    if binary:
        parts = [_ESVF_HEADER.pack(ESVF_MAGIC, ESVF_VERSION, X.n, X.dim, int(stamped))]
        if stamped:
            parts.append(X.timestamps.astype("<f8").tobytes())
        parts.append(X.elements.astype("<f8").tobytes())
        atomic_write(path, b"".join(parts))
        return
    out = [f"{X.n},{X.dim}" + (",t" if stamped else "")]
    for k, row in enumerate(X.elements):
        cells = [repr(float(v)) for v in row]
        if stamped:
            cells.insert(0, repr(float(X.timestamps[k])))
        out.append(",".join(cells))
    atomic_write(path, "\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# models


def read_model_spec(path) -> ModelSpec:
    raw = _read_bytes(path)
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: not a JSON document ({exc})") from None
    return spec_from_dict(doc)


def write_model_spec(path, spec: ModelSpec) -> None:
    atomic_write(path, json.dumps(spec_to_dict(spec), indent=1) + "\n")


# ---------------------------------------------------------------------------
# results


def result_to_dict(result: AttributionResult, extra: dict | None = None) -> dict:
    doc = {
        "format": RESULT_FORMAT,
        "mode": result.mode,
        "n": result.n,
        "classes": list(result.classes),
        "phi": [[float(v) for v in row] for row in result.phi],
        "evidential": [float(v) for v in result.evidential],
        "m": result.m,
        "iterations": result.iterations,
        "seed": result.seed,
        "strict_alg1": result.strict_alg1,
        "model_calls": result.model_calls,
    }
    if extra:
        doc.update(extra)
    return doc


def result_from_dict(doc: dict) -> AttributionResult:
    if doc.get("format") != RESULT_FORMAT:
        raise ValidationError(f"format: expected {RESULT_FORMAT!r}, got {doc.get('format')!r}")
    phi = np.asarray(doc["phi"], dtype=np.float64).reshape(int(doc["n"]), len(doc["classes"]))
    return AttributionResult(
        phi=phi,
        classes=tuple(int(c) for c in doc["classes"]),
        evidential=np.asarray(doc["evidential"], dtype=np.float64),
        mode=doc["mode"],
        model_calls=int(doc["model_calls"]),
        m=doc.get("m"),
        iterations=doc.get("iterations"),
        seed=doc.get("seed"),
        strict_alg1=bool(doc.get("strict_alg1", False)),
    )


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def write_result(path, result: AttributionResult, extra: dict | None = None) -> None:
    atomic_write(path, dumps(result_to_dict(result, extra)))


def read_result(path) -> AttributionResult:
    raw = _read_bytes(path)
    try:
        return result_from_dict(json.loads(raw))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed result document ({exc})") from None
