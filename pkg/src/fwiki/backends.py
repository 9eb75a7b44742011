"""Version-control backends for the central and frontend repositories.

Both backends expose the same small surface: a linear ``master`` branch, an
admin-only ``stable`` branch, release tags, snapshot checkout, and change
detection for the central worktree and the frontend. Only ``*.fml`` sources
are ever tracked.

``PlainDirBackend`` keeps content-addressed blobs and JSON commit objects
under ``<central>/.fwiki/store``. ``GitBackend`` drives the ``git`` command
line and installs hook scripts that call back into ``fwiki hook ...``.
"""

from __future__ import annotations

import abc
import hashlib
import json
import os
import shlex
import shutil
import subprocess
import sys
from pathlib import Path
from typing import Mapping

from fwiki.changes import Action, Change, is_source_path

GATE_ENV = "FWIKI_GATE_ACTIVE"
IGNORE_RULES = "# only article sources are tracked; everything else is generated\n/*\n!/*.fml\n!/.gitignore\n"


class BackendError(Exception):
    pass


def diff_trees(old: Mapping[str, bytes], new: Mapping[str, bytes]) -> list[Change]:
    """Changes turning snapshot ``old`` into ``new``, sorted by path."""
    changes = []
    for path in sorted(set(old) | set(new)):
        if path not in new:
            changes.append(Change(path, Action.DELETE))
        elif path not in old:
            changes.append(Change(path, Action.ADD, new[path]))
        elif old[path] != new[path]:
            changes.append(Change(path, Action.MODIFY, new[path]))
    return changes


def read_source_dir(path: Path) -> dict[str, bytes]:
    if not path.is_dir():
        return {}
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file() and is_source_path(p.name)}


def write_source_dir(path: Path, tree: Mapping[str, bytes]) -> None:
    """Make the ``*.fml`` files of ``path`` equal ``tree``; other files stay."""
    path.mkdir(parents=True, exist_ok=True)
    current = read_source_dir(path)
    for name in current.keys() - tree.keys():
        (path / name).unlink()
    for name, data in tree.items():
        if current.get(name) != data:
            (path / name).write_bytes(data)


def apply_changes(tree: Mapping[str, bytes], changes: list[Change]) -> dict[str, bytes]:
    out = dict(tree)
    for ch in changes:
        if ch.action is Action.DELETE:
            out.pop(ch.path, None)
        else:
            out[ch.path] = ch.payload or b""
    return out


class Backend(abc.ABC):
    kind: str

    def __init__(self, central: Path, frontend: Path | None = None) -> None:
        self.central = Path(central)
        self.frontend = None if frontend is None else Path(frontend)

    @abc.abstractmethod
    def create(self) -> None:
        """Create an empty central repository."""

    @abc.abstractmethod
    def head(self, branch: str = "master") -> str | None: ...

    @abc.abstractmethod
    def commit(self, changes: list[Change], author: str, message: str) -> str:
        """Advance master by one commit applying ``changes``."""

    @abc.abstractmethod
    def tree(self, commit_id: str) -> dict[str, bytes]: ...

    @abc.abstractmethod
    def log(self, branch: str = "master") -> list[str]:
        """Commit ids of ``branch``, oldest first (first-parent)."""

    @abc.abstractmethod
    def set_branch(self, branch: str, commit_id: str) -> None: ...

    @abc.abstractmethod
    def tag(self, name: str, commit_id: str) -> None: ...

    @abc.abstractmethod
    def tags(self) -> list[str]: ...

    @abc.abstractmethod
    def staged_changes(self) -> list[Change]:
        """Changes staged in the central worktree relative to master."""

    @abc.abstractmethod
    def clone_frontend(self) -> None: ...

    @abc.abstractmethod
    def frontend_changes(self) -> list[Change]:
        """What the frontend holds that central master does not."""

    @abc.abstractmethod
    def reset_frontend(self) -> None:
        """Realign the frontend with central master."""

    def is_ancestor(self, ancestor: str, descendant: str) -> bool:
        return ancestor in self.log_of(descendant)

    def log_of(self, commit_id: str) -> list[str]:
        history = self.log()
        return history[: history.index(commit_id) + 1] if commit_id in history else []

    def master_tree(self) -> dict[str, bytes]:
        head = self.head()
        return {} if head is None else self.tree(head)

    def sync_worktree(self) -> None:
        write_source_dir(self.central, self.master_tree())


class PlainDirBackend(Backend):
    kind = "plain"

    @property
    def store(self) -> Path:
        return self.central / ".fwiki" / "store"

    def create(self) -> None:
        for sub in ("objects", "commits", "refs/heads", "refs/tags"):
            (self.store / sub).mkdir(parents=True, exist_ok=True)

    def _ref(self, name: str) -> Path:
        return self.store / "refs" / name

    def head(self, branch: str = "master") -> str | None:
        ref = self._ref(f"heads/{branch}")
        return ref.read_text("ascii").strip() if ref.exists() else None

    def _put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.store / "objects" / digest
        if not path.exists():
            _atomic(path, data)
        return digest

    def commit(self, changes: list[Change], author: str, message: str) -> str:
        parent = self.head()
        tree = apply_changes(self.tree(parent) if parent else {}, changes)
        obj = {
            "author": author,
            "message": message,
            "parent": parent,
            "tree": {path: self._put_blob(data) for path, data in sorted(tree.items())},
        }
        raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        commit_id = hashlib.sha256(raw).hexdigest()[:40]
        _atomic(self.store / "commits" / f"{commit_id}.json", raw)
        self.set_branch("master", commit_id)
        return commit_id

    def _commit_obj(self, commit_id: str) -> dict:
        path = self.store / "commits" / f"{commit_id}.json"
        if not path.exists():
            raise BackendError(f"unknown commit {commit_id}")
        return json.loads(path.read_bytes())

    def tree(self, commit_id: str) -> dict[str, bytes]:
        obj = self._commit_obj(commit_id)
        return {path: (self.store / "objects" / blob).read_bytes() for path, blob in obj["tree"].items()}

    def commit_info(self, commit_id: str) -> dict:
        obj = self._commit_obj(commit_id)
        return {"author": obj["author"], "message": obj["message"], "parent": obj["parent"]}

    def log(self, branch: str = "master") -> list[str]:
        out = []
        cur = self.head(branch)
        while cur is not None:
            out.append(cur)
            cur = self._commit_obj(cur)["parent"]
        return out[::-1]

    def set_branch(self, branch: str, commit_id: str) -> None:
        _atomic(self._ref(f"heads/{branch}"), (commit_id + "\n").encode("ascii"))

    def tag(self, name: str, commit_id: str) -> None:
        ref = self._ref(f"tags/{name}")
        if ref.exists():
            raise BackendError(f"tag {name} exists")
        _atomic(ref, (commit_id + "\n").encode("ascii"))

    def tags(self) -> list[str]:
        tag_dir = self._ref("tags")
        return sorted(p.name for p in tag_dir.iterdir()) if tag_dir.is_dir() else []

    def staged_changes(self) -> list[Change]:
        return diff_trees(self.master_tree(), read_source_dir(self.central))

    def clone_frontend(self) -> None:
        assert self.frontend is not None
        self.frontend.mkdir(parents=True, exist_ok=True)
        (self.frontend / ".fwiki-frontend").write_text(f"central = {self.central.resolve()}\n")
        write_source_dir(self.frontend, self.master_tree())

    def frontend_changes(self) -> list[Change]:
        assert self.frontend is not None
        return diff_trees(self.master_tree(), read_source_dir(self.frontend))

    def reset_frontend(self) -> None:
        assert self.frontend is not None
        write_source_dir(self.frontend, self.master_tree())


def _atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------


_LOCATION_VARS = frozenset({
    "GIT_DIR", "GIT_WORK_TREE", "GIT_INDEX_FILE", "GIT_OBJECT_DIRECTORY",
    "GIT_ALTERNATE_OBJECT_DIRECTORIES", "GIT_QUARANTINE_PATH", "GIT_COMMON_DIR", "GIT_PREFIX",
})


def git_available() -> bool:
    return shutil.which("git") is not None


def _hook_script(hook: str, central: Path) -> str:
    cmd = [sys.executable, "-m", "fwiki", "hook", hook, "--repo", str(central.resolve())]
    return f"#!/bin/sh\nexec {shlex.join(cmd)}\n"


class GitBackend(Backend):
    kind = "git"

    _ENV = {
        "GIT_COMMITTER_NAME": "fwiki gate",
        "GIT_COMMITTER_EMAIL": "gate@fwiki.invalid",
        "GIT_CONFIG_NOSYSTEM": "1",
    }

    def _environ(self, git_dir: Path | None = None, extra: dict | None = None) -> dict:
        # Hooks run with GIT_DIR and friends pointing at the repository that
        # fired them; the target repository is chosen by cwd/--git-dir instead.
        env = {k: v for k, v in os.environ.items() if k not in _LOCATION_VARS}
        if git_dir is None and "GIT_INDEX_FILE" in os.environ:
            env["GIT_INDEX_FILE"] = os.environ["GIT_INDEX_FILE"]
        env.update(self._ENV)
        env.update(extra or {})
        return env

    def _git(self, *args: str, cwd: Path | None = None, git_dir: Path | None = None,
             input: bytes | None = None, check: bool = True, env: dict | None = None) -> bytes:
        cmd = ["git"]
        if git_dir is not None:
            cmd += ["--git-dir", str(git_dir)]
        full_env = self._environ(git_dir, env)
        proc = subprocess.run(
            cmd + list(args),
            cwd=cwd or self.central,
            input=input,
            capture_output=True,
            env=full_env,
        )
        if check and proc.returncode != 0:
            raise BackendError(f"git {' '.join(args)} failed: {proc.stderr.decode(errors='replace').strip()}")
        return proc.stdout

    def create(self) -> None:
        self.central.mkdir(parents=True, exist_ok=True)
        self._git("init", "-q", "-b", "master")
        self._git("config", "user.name", "fwiki gate")
        self._git("config", "user.email", "gate@fwiki.invalid")
        (self.central / ".gitignore").write_text(IGNORE_RULES)
        hooks = self.central / ".git" / "hooks"
        for hook in ("pre-commit", "post-commit"):
            path = hooks / hook
            path.write_text(_hook_script(hook, self.central))
            path.chmod(0o755)

    def head(self, branch: str = "master") -> str | None:
        out = self._git("rev-parse", "--verify", "-q", f"refs/heads/{branch}", check=False)
        return out.decode().strip() or None

    def commit(self, changes: list[Change], author: str, message: str) -> str:
        for ch in changes:
            path = self.central / ch.path
            if ch.action is Action.DELETE:
                if path.exists():
                    path.unlink()
            else:
                path.write_bytes(ch.payload or b"")
        self._git("add", "-A", "--", ".")
        self._git(
            "commit", "-q", "--allow-empty", "--no-verify", "-m", message or "(no message)",
            "--author", f"{author} <{_email(author)}>",
            env={GATE_ENV: "1"},
        )
        return self.head()  # type: ignore[return-value]

    def tree(self, commit_id: str) -> dict[str, bytes]:
        listing = self._git("ls-tree", "-r", "-z", commit_id).split(b"\0")
        out = {}
        for entry in listing:
            if not entry:
                continue
            meta, _, path = entry.partition(b"\t")
            name = path.decode()
            if is_source_path(name):
                out[name] = self._git("cat-file", "blob", meta.split()[2].decode())
        return out

    def log(self, branch: str = "master") -> list[str]:
        if self.head(branch) is None:
            return []
        return self._git("rev-list", "--first-parent", "--reverse", branch).decode().split()

    def is_ancestor(self, ancestor: str, descendant: str) -> bool:
        out = subprocess.run(
            ["git", "merge-base", "--is-ancestor", ancestor, descendant],
            cwd=self.central, capture_output=True, env=self._environ(),
        )
        return out.returncode == 0

    def set_branch(self, branch: str, commit_id: str) -> None:
        self._git("update-ref", f"refs/heads/{branch}", commit_id)

    def tag(self, name: str, commit_id: str) -> None:
        self._git("tag", name, commit_id)

    def tags(self) -> list[str]:
        return sorted(self._git("tag", "--list").decode().split())

    def staged_changes(self) -> list[Change]:
        head = self.head()
        out = []
        if head is None:
            listing = self._git("ls-files", "-z", "--cached").split(b"\0")
            for raw in listing:
                name = raw.decode()
                if is_source_path(name):
                    out.append(Change(name, Action.ADD, self._git("show", f":{name}")))
            return out
        fields = self._git("diff", "--cached", "--name-status", "-z", "--no-renames", head).split(b"\0")
        it = iter(f.decode() for f in fields if f)
        for status, name in zip(it, it):
            if not is_source_path(name):
                # Still reported so that the gate rejects it as an illegal path.
                out.append(Change(name, Action.MODIFY, b""))
            elif status == "D":
                out.append(Change(name, Action.DELETE))
            else:
                action = Action.ADD if status == "A" else Action.MODIFY
                out.append(Change(name, action, self._git("show", f":{name}")))
        return sorted(out, key=lambda c: c.path)

    def clone_frontend(self) -> None:
        assert self.frontend is not None
        self._git("clone", "-q", "--bare", str(self.central.resolve()), str(self.frontend.resolve()),
                  cwd=self.central.parent)
        hook = self.frontend / "hooks" / "post-receive"
        hook.write_text(_hook_script("post-receive", self.central))
        hook.chmod(0o755)

    def frontend_changes(self) -> list[Change]:
        assert self.frontend is not None
        head = self._git("rev-parse", "--verify", "-q", "refs/heads/master", git_dir=self.frontend, check=False)
        head = head.decode().strip()
        if not head:
            return []
        listing = self._git("ls-tree", "-r", "-z", head, git_dir=self.frontend).split(b"\0")
        tree = {}
        for entry in listing:
            if not entry:
                continue
            meta, _, path = entry.partition(b"\t")
            if is_source_path(path.decode()):
                tree[path.decode()] = self._git("cat-file", "blob", meta.split()[2].decode(), git_dir=self.frontend)
        return diff_trees(self.master_tree(), tree)

    def reset_frontend(self) -> None:
        assert self.frontend is not None
        self._git("fetch", "-q", "--update-head-ok", str(self.central.resolve()), "+master:master",
                  git_dir=self.frontend)


def _email(author: str) -> str:
    local = "".join(c for c in author.lower() if c.isalnum() or c in "._-") or "user"
    return f"{local}@fwiki.invalid"


def open_backend(central: Path, frontend: Path | None = None) -> Backend:
    if (Path(central) / ".git").exists():
        return GitBackend(central, frontend)
    return PlainDirBackend(central, frontend)
