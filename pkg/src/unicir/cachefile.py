"""Newline-delimited key/hash/payload cache files with atomic rewrites.

One JSON object per line: {"key": ..., "input_hash": ..., "payload": ...}.
Files are rewritten whole via a temp file and rename, with entries sorted by
key, so two runs that compute the same entries in any order produce
byte-identical cache files.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path

from .errors import ManifestParseError


def input_hash(*parts: bytes | str) -> str:
    """SHA-256 over the given parts separated by unit separators."""
    h = hashlib.sha256()
    for i, part in enumerate(parts):
        if i:
            h.update(b"\x1f")
        h.update(part.encode("utf-8") if isinstance(part, str) else part)
    return h.hexdigest()


def hash_file(path: str | Path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class LineCache:
    """A small on-disk map from key to (input_hash, payload)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, tuple[str, object]] = {}
        self._lock = threading.RLock()  # parallel preprocessing shares one cache
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestParseError(
                        f"{self.path}: line {lineno}: invalid cache record ({exc.msg})"
                    ) from exc
                if not isinstance(obj, dict) or "key" not in obj or "input_hash" not in obj:
                    raise ManifestParseError(
                        f"{self.path}: line {lineno}: cache record missing key/input_hash"
                    )
                self._entries[str(obj["key"])] = (str(obj["input_hash"]), obj.get("payload"))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def keys(self):
        return self._entries.keys()

    def get(self, key: str) -> tuple[str, object] | None:
        return self._entries.get(key)

    def lookup(self, key: str, expected_hash: str) -> object | None:
        """Payload if present with a matching input hash, else None."""
        entry = self._entries.get(key)
        if entry is None or entry[0] != expected_hash:
            return None
        return entry[1]

    def put(self, key: str, ihash: str, payload: object, flush: bool = True) -> None:
        with self._lock:
            self._entries[key] = (ihash, payload)
            if flush:
                self.flush()

    def flush(self) -> None:
        """Atomically rewrite the file with entries sorted by key."""
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for key in sorted(self._entries):
                    ihash, payload = self._entries[key]
                    fh.write(
                        json.dumps(
                            {"key": key, "input_hash": ihash, "payload": payload},
                            ensure_ascii=False,
                            sort_keys=True,
                        )
                        + "\n"
                    )
            os.replace(tmp, self.path)
