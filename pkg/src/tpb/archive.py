"""Self-describing array archives.

Artifacts (series files, checkpoints, embedding dumps) are ``.npz`` archives
with a JSON header stored under ``__header__``. The header always carries a
``payload_sha256`` over the array bytes, validated on reload, so a stale or
truncated artifact fails loudly instead of silently feeding a later stage.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .errors import ArchiveError

HEADER_KEY = "__header__"


def _payload_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_archive(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if HEADER_KEY in arrays:
        raise ValueError(f"array name {HEADER_KEY!r} is reserved")
    header = dict(header)
    header["payload_sha256"] = _payload_digest(arrays)
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # np.savez writes zip entries in insertion order; fixed order keeps the
    # file byte-stable for identical inputs.
    with open(path, "wb") as fh:
        np.savez(fh, **{HEADER_KEY: blob}, **{k: arrays[k] for k in sorted(arrays)})


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with np.load(path) as npz:
            names = list(npz.files)
            if HEADER_KEY not in names:
                raise ArchiveError(f"{path}: not a recognized archive (missing header)")
            header = json.loads(bytes(npz[HEADER_KEY]).decode("utf-8"))
            arrays = {n: npz[n] for n in names if n != HEADER_KEY}
    except (OSError, ValueError, KeyError) as exc:
        raise ArchiveError(f"{path}: unreadable archive: {exc}") from exc
    expected = header.get("payload_sha256")
    if expected is None:
        raise ArchiveError(f"{path}: header carries no payload hash")
    actual = _payload_digest(arrays)
    if actual != expected:
        raise ArchiveError(f"{path}: payload hash mismatch (file corrupt or edited)")
    return header, arrays


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()
