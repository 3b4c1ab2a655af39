"""Shared persistence: one file per record, safe across threads and processes.

Every server instance in a cluster points at the same root directory. Records
are written to a temp file and renamed into place, so readers never observe a
torn record; ``put_if_absent`` relies on exclusive-create semantics for
cross-process uniqueness (ref-id allocation).

Layout:

    <root>/projects/<project_id>.json
    <root>/secrets/<ref_id>.json
    <root>/sessions/<session_id>.json

Record contents are the JSON encodings defined by the trusted core; all
values at rest are ciphertext or public metadata.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from .errors import NotFound, StoreError

TABLES = ("projects", "secrets", "sessions")


def _safe_key(key: str) -> str:
    if not key:
        raise StoreError("empty key")
    if "/" in key or "\\" in key or key in (".", ".."):
        raise StoreError(f"illegal key: {key!r}")
    return key


class Store:
    """Filesystem-backed table/key/value store."""

    def __init__(self, root_path: str | Path):
        self.root_path = Path(root_path)
        for table in TABLES:
            (self.root_path / table).mkdir(parents=True, exist_ok=True)

    def _path(self, table: str, key: str) -> Path:
        if table not in TABLES:
            raise StoreError(f"unknown table: {table}")
        return self.root_path / table / f"{_safe_key(key)}.json"

    def put(self, table: str, key: str, value: bytes) -> None:
        """Durable last-writer-wins write, atomic at record granularity."""
        target = self._path(table, key)
        try:
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{key}.")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(value)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, target)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        except OSError as exc:
            raise StoreError(f"write failed for {table}/{key}: {exc}") from exc

    def get(self, table: str, key: str) -> bytes:
        target = self._path(table, key)
        try:
            return target.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{table}/{key}") from None
        except OSError as exc:
            raise StoreError(f"read failed for {table}/{key}: {exc}") from exc

    def put_if_absent(self, table: str, key: str, value: bytes) -> bool:
        """Atomically create the record; returns False when it already exists.

        The record is fully written to a temp file first, then hard-linked
        into place: link() is exclusive across processes sharing the root,
        and the record becomes visible only once complete.
        """
        target = self._path(table, key)
        try:
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{key}.")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(value)
                    fh.flush()
                    os.fsync(fh.fileno())
                try:
                    os.link(tmp, target)
                except FileExistsError:
                    return False
            finally:
                os.unlink(tmp)
        except OSError as exc:
            raise StoreError(f"create failed for {table}/{key}: {exc}") from exc
        return True

    def exists(self, table: str, key: str) -> bool:
        return self._path(table, key).exists()

    def delete(self, table: str, key: str) -> None:
        try:
            self._path(table, key).unlink()
        except FileNotFoundError:
            raise NotFound(f"{table}/{key}") from None

    def keys(self, table: str) -> list[str]:
        if table not in TABLES:
            raise StoreError(f"unknown table: {table}")
        return sorted(p.stem for p in (self.root_path / table).glob("*.json"))
