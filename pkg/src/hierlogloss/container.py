"""Plain-text header followed by a little-endian float64 payload.

Layout::

    <magic>\\n
    key=value\\n          (any number of lines)
    end\\n
    <raw <f8 bytes>

Used for both the dataset and the model files.
"""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .errors import BadMagic, HeaderMismatch, TruncatedFile

_END = b"end\n"


def write_container(path, magic: str, header: Dict[str, object], arrays) -> None:
    lines = [magic]
    for key, value in header.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"header entry {key!r} is not representable")
        lines.append(f"{key}={text}")
    head = ("\n".join(lines) + "\n").encode("utf-8") + _END
    with open(path, "wb") as fh:
        fh.write(head)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, magic: str) -> Tuple[Dict[str, str], np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    first = raw.split(b"\n", 1)[0]
    if first.decode("utf-8", "replace") != magic:
        raise BadMagic(f"{path}: expected {magic!r}, found {first[:40]!r}")
    cut = raw.find(b"\n" + _END)
    if cut < 0:
        raise TruncatedFile(f"{path}: header has no terminating 'end' line")
    head = raw[len(first) + 1 : cut + 1]
    payload = raw[cut + 1 + len(_END) :]
    header = {}
    for line in head.decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise HeaderMismatch(f"{path}: malformed header line {line!r}")
        header[key] = value
    if len(payload) % 8:
        raise TruncatedFile(f"{path}: payload is not a whole number of float64 values")
    return header, np.frombuffer(payload, dtype="<f8").astype(np.float64)


def header_int(header: Dict[str, str], key: str, path="") -> int:
    try:
        return int(header[key])
    except (KeyError, ValueError) as exc:
        raise HeaderMismatch(f"{path}: header field {key!r} missing or not an integer") from exc
