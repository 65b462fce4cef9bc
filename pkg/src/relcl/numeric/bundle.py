"""Flat files of named float64 matrices.

Used for parameter checkpoints and per-record embedding sidecars.

Binary layout::

    RELCL-BUNDLE 1\\n
    <json metadata>\\n
    <count>\\n
    then per matrix: "<name> <rows> <cols>\\n" followed by rows*cols
    little-endian float64 values, row-major

Text layout (for tools that cannot write binary)::

    #RELCL-BUNDLE-TEXT 1
    #meta <json metadata>
    matrix <name> <rows> <cols>
    <one line per row, whitespace separated>

Names must not contain whitespace. Both variants round-trip exactly;
the text writer uses ``repr`` of each float.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"RELCL-BUNDLE 1\n"
TEXT_MAGIC = "#RELCL-BUNDLE-TEXT 1"


class BundleError(ValueError):
    pass


def _as_matrix(name, value):
    m = np.asarray(value, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise BundleError(f"{name}: expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise BundleError(f"{name}: non-finite entries")
    return m


def save_bundle(path, matrices: dict, meta: dict | None = None, text: bool = False) -> None:
    path = Path(path)
    meta_line = json.dumps(meta or {}, sort_keys=True)
    if text:
        lines = [TEXT_MAGIC, f"#meta {meta_line}"]
        for name, value in matrices.items():
            m = _as_matrix(name, value)
            lines.append(f"matrix {name} {m.shape[0]} {m.shape[1]}")
            lines.extend(" ".join(repr(float(x)) for x in row) for row in m)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return
    chunks = [BINARY_MAGIC, meta_line.encode() + b"\n", f"{len(matrices)}\n".encode()]
    for name, value in matrices.items():
        if any(ch.isspace() for ch in name):
            raise BundleError(f"matrix name {name!r} contains whitespace")
        m = _as_matrix(name, value)
        chunks.append(f"{name} {m.shape[0]} {m.shape[1]}\n".encode())
        chunks.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def load_bundle(path) -> tuple[dict, dict]:
    """Return ``(matrices, meta)`` from either bundle variant."""
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(BINARY_MAGIC):
        return _load_binary(path, raw)
    if raw.startswith(TEXT_MAGIC.encode()):
        return _load_text(path, raw.decode("utf-8"))
    raise BundleError(f"{path}: unrecognized bundle header")


def _load_binary(path, raw):
    pos = len(BINARY_MAGIC)

    def line():
        nonlocal pos
        end = raw.index(b"\n", pos)
        out = raw[pos:end].decode()
        pos = end + 1
        return out

    try:
        meta = json.loads(line())
        count = int(line())
        matrices = {}
        for _ in range(count):
            name, rows, cols = line().split()
            rows, cols = int(rows), int(cols)
            nbytes = rows * cols * 8
            if pos + nbytes > len(raw):
                raise BundleError(f"{path}: truncated matrix {name}")
            matrices[name] = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
            pos += nbytes
    except (ValueError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: malformed bundle ({exc})") from exc
    return matrices, meta


def _load_text(path, text):
    lines = text.splitlines()
    meta = {}
    matrices = {}
    i = 1
    try:
        while i < len(lines):
            ln = lines[i].strip()
            i += 1
            if not ln:
                continue
            if ln.startswith("#meta "):
                meta = json.loads(ln[6:])
                continue
            if ln.startswith("#"):
                continue
            kind, name, rows, cols = ln.split()
            if kind != "matrix":
                raise BundleError(f"{path}: expected 'matrix' line, got {ln!r}")
            rows, cols = int(rows), int(cols)
            m = np.array([[float(x) for x in lines[i + r].split()] for r in range(rows)], dtype=np.float64)
            i += rows
            matrices[name] = m.reshape(rows, cols)
    except (ValueError, IndexError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: malformed text bundle ({exc})") from exc
    return matrices, meta
