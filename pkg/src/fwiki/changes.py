"""Commit requests: what a user proposes to change in the library."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

SOURCE_PATH_RE = re.compile(r"[a-z][a-z0-9_]{0,63}\.fml")


class Action(str, enum.Enum):
    ADD = "add"
    MODIFY = "modify"
    DELETE = "delete"


class IllegalPath(ValueError):
    def __init__(self, path: str) -> None:
        super().__init__(f"illegal path {path!r}: only <name>.fml at the library root may change")
        self.path = path


class InvalidRequest(ValueError):
    pass


@dataclass(frozen=True)
class Change:
    path: str
    action: Action
    payload: bytes | None = None

    @property
    def article(self) -> str:
        return self.path[: -len(".fml")]


@dataclass(frozen=True)
class CommitRequest:
    author: str
    message: str
    changes: tuple[Change, ...] = field(default_factory=tuple)

    def validate(self, max_files: int | None = None, max_bytes: int | None = None) -> None:
        """Structural checks; raises IllegalPath or InvalidRequest."""
        seen: set[str] = set()
        for ch in self.changes:
            if not is_source_path(ch.path):
                raise IllegalPath(ch.path)
            if ch.path in seen:
                raise InvalidRequest(f"path {ch.path!r} appears twice in one request")
            seen.add(ch.path)
            if (ch.payload is None) != (ch.action is Action.DELETE):
                raise InvalidRequest(f"{ch.action.value} of {ch.path!r}: payload required iff not a delete")
        if max_files is not None and len(self.changes) > max_files:
            raise InvalidRequest(f"request touches {len(self.changes)} files, limit is {max_files}")
        total = sum(len(ch.payload or b"") for ch in self.changes)
        if max_bytes is not None and total > max_bytes:
            raise InvalidRequest(f"request carries {total} bytes, limit is {max_bytes}")

    def to_json(self) -> dict:
        return {
            "author": self.author,
            "message": self.message,
            "changes": [
                {
                    "path": c.path,
                    "action": c.action.value,
                    "payload": None if c.payload is None else c.payload.decode("utf-8", "replace"),
                }
                for c in self.changes
            ],
        }


def is_source_path(path: str) -> bool:
    return SOURCE_PATH_RE.fullmatch(path) is not None
