"""Clean and dirty sandboxes, content-hash tree sync, overlay and promote.

Layout of a sandbox root::

    *.fml            sources
    deps/*.d         dependency manifests
    state/build.json build state
    state/tree.idx   hash cache (path, size, mtime, hash); private to the root
    state/links.idx  link-check cache for the publish directory; private
    html/*.html      rendered pages
    VALID            promotion marker

The hash cache only saves work: a cached hash is used when the file's size,
mtime, ctime and inode all still match.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from fwiki.changes import Action, CommitRequest, IllegalPath, is_source_path
from fwiki.verifier import COHERENT, BuildState

CLEAN = "clean"
DIRTY = "dirty"
INDEX_FILE = "state/tree.idx"
VALID_FILE = "VALID"
UNALIGNED_FILE = "UNALIGNED"
PROMOTE_DIR = ".promote"
LINK_CACHE_FILE = "state/links.idx"
_PRIVATE = frozenset({INDEX_FILE, LINK_CACHE_FILE, VALID_FILE, UNALIGNED_FILE})


class PromoteIncoherent(Exception):
    pass


@dataclass
class IOStats:
    """Counters for body reads and tree writes (instrumentation)."""

    bytes_hashed: int = 0
    files_hashed: int = 0
    bytes_copied: int = 0
    files_written: int = 0
    files_deleted: int = 0

    def reset(self) -> None:
        self.bytes_hashed = self.files_hashed = self.bytes_copied = 0
        self.files_written = self.files_deleted = 0

    @property
    def bytes_read(self) -> int:
        return self.bytes_hashed + self.bytes_copied


io_stats = IOStats()


def _is_private(rel: str) -> bool:
    return rel in _PRIVATE or rel.startswith(PROMOTE_DIR + "/") or rel.rsplit("/", 1)[-1].startswith(".")


@dataclass(frozen=True)
class Sandbox:
    root: Path
    role: str = DIRTY

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))

    @property
    def deps_dir(self) -> Path:
        return self.root / "deps"

    @property
    def html_dir(self) -> Path:
        return self.root / "html"

    def ensure(self) -> Sandbox:
        for d in (self.root, self.deps_dir, self.root / "state", self.html_dir):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def walk(self) -> dict[str, os.stat_result]:
        """Relative POSIX path -> stat for every tracked file."""
        out: dict[str, os.stat_result] = {}
        root = str(self.root)
        for dirpath, dirnames, filenames in os.walk(root):
            rel_dir = os.path.relpath(dirpath, root)
            prefix = "" if rel_dir == "." else rel_dir.replace(os.sep, "/") + "/"
            if prefix == PROMOTE_DIR + "/":
                dirnames[:] = []
                continue
            dirnames[:] = [d for d in dirnames if d != PROMOTE_DIR]
            for fn in filenames:
                rel = prefix + fn
                if not _is_private(rel):
                    out[rel] = os.stat(os.path.join(dirpath, fn))
        return out

    def build_state(self) -> BuildState:
        return BuildState.load(self.root)


class TreeIndex:
    """Persistent per-sandbox hash cache."""

    def __init__(self, sandbox: Sandbox, trust: bool = True) -> None:
        self.sandbox = sandbox
        self.path = sandbox.root / INDEX_FILE
        self.entries: dict[str, tuple[int, int, int, int, str]] = {}
        if trust and self.path.exists():
            for line in self.path.read_text("utf-8").splitlines():
                rel, size, mtime, ctime, ino, digest = line.rsplit("\t", 5)
                self.entries[rel] = (int(size), int(mtime), int(ctime), int(ino), digest)

    @staticmethod
    def _key(st: os.stat_result) -> tuple[int, int, int, int]:
        return (st.st_size, st.st_mtime_ns, st.st_ctime_ns, st.st_ino)

    def hash_of(self, rel: str, st: os.stat_result) -> str:
        cached = self.entries.get(rel)
        key = self._key(st)
        if cached is not None and cached[:4] == key:
            return cached[4]
        data = (self.sandbox.root / rel).read_bytes()
        io_stats.bytes_hashed += len(data)
        io_stats.files_hashed += 1
        digest = hashlib.sha256(data).hexdigest()
        self.entries[rel] = (*key, digest)
        return digest

    def record(self, rel: str, digest: str) -> None:
        st = os.stat(self.sandbox.root / rel)
        self.entries[rel] = (*self._key(st), digest)

    def forget(self, rel: str) -> None:
        self.entries.pop(rel, None)

    def save(self, present: dict[str, os.stat_result] | None = None) -> None:
        if present is not None:
            self.entries = {k: v for k, v in self.entries.items() if k in present}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{rel}\t{s}\t{m}\t{c}\t{i}\t{h}\n" for rel, (s, m, c, i, h) in sorted(self.entries.items())]
        tmp = self.path.with_name(".tree.idx.tmp")
        tmp.write_text("".join(lines), "utf-8")
        os.replace(tmp, self.path)


def _index(sandbox: Sandbox) -> TreeIndex:
    return TreeIndex(sandbox, trust=not (sandbox.root / UNALIGNED_FILE).exists())


def tree_hash(sandbox: Sandbox) -> str:
    """Hash of the whole tracked tree (paths and contents)."""
    files = sandbox.walk()
    idx = _index(sandbox)
    digest = _tree_digest(files, idx)
    idx.save(files)
    return digest


def _tree_digest(files: dict[str, os.stat_result], idx: TreeIndex) -> str:
    h = hashlib.sha256()
    for rel in sorted(files):
        h.update(f"{rel}\0{idx.hash_of(rel, files[rel])}\n".encode("utf-8"))
    return h.hexdigest()


@dataclass(frozen=True)
class SyncPlan:
    copy: frozenset[str] = field(default_factory=frozenset)
    delete: frozenset[str] = field(default_factory=frozenset)

    def __bool__(self) -> bool:
        return bool(self.copy or self.delete)


def _diff(source: Sandbox, target: Sandbox):
    s_files, t_files = source.walk(), target.walk()
    s_idx, t_idx = _index(source), _index(target)
    copy = set()
    for rel, st in s_files.items():
        tst = t_files.get(rel)
        if tst is None or tst.st_size != st.st_size:
            copy.add(rel)
        elif s_idx.hash_of(rel, st) != t_idx.hash_of(rel, tst):
            copy.add(rel)
    delete = set(t_files) - set(s_files)
    return SyncPlan(frozenset(copy), frozenset(delete)), s_files, t_files, s_idx, t_idx


def diff_trees(source: Sandbox, target: Sandbox) -> SyncPlan:
    """Paths to copy (differing or missing in target) and to delete.

    Files of different size are never read; equal-size files are compared by
    SHA-256 through each side's hash cache.
    """
    plan, s_files, t_files, s_idx, t_idx = _diff(source, target)
    s_idx.save(s_files)
    t_idx.save(t_files)
    return plan


def sync(source: Sandbox, target: Sandbox) -> SyncPlan:
    """Make ``target``'s tree content-identical to ``source``'s.

    Exactly one write per copied path and one unlink per deleted path. On an
    IO error the target is marked unaligned so the next sync rehashes it.
    """
    target.root.mkdir(parents=True, exist_ok=True)
    plan, s_files, t_files, s_idx, t_idx = _diff(source, target)
    marker = target.root / UNALIGNED_FILE
    try:
        for rel in sorted(plan.copy):
            data = (source.root / rel).read_bytes()
            io_stats.bytes_copied += len(data)
            digest = hashlib.sha256(data).hexdigest()
            _write_file(target.root / rel, data)
            io_stats.files_written += 1
            t_idx.record(rel, digest)
            if s_idx.entries.get(rel, (None,) * 5)[4] != digest:
                s_idx.record(rel, digest)
        for rel in sorted(plan.delete):
            (target.root / rel).unlink()
            io_stats.files_deleted += 1
            t_idx.forget(rel)
            _prune_dirs(target.root, rel)
    except OSError:
        marker.write_text("sync interrupted\n")
        raise
    if marker.exists():
        marker.unlink()
    s_idx.save(s_files)
    t_idx.save()
    return plan


def _write_file(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _prune_dirs(root: Path, rel: str) -> None:
    parent = (root / rel).parent
    while parent != root:
        try:
            parent.rmdir()
        except OSError:
            return
        parent = parent.parent


def overlay(target: Sandbox, request: CommitRequest) -> set[str]:
    """Apply a request's source changes; every path is checked before any write."""
    for ch in request.changes:
        if not is_source_path(ch.path):
            raise IllegalPath(ch.path)
    touched = set()
    for ch in request.changes:
        path = target.root / ch.path
        if ch.action is Action.DELETE:
            if path.exists():
                path.unlink()
        else:
            _write_file(path, ch.payload or b"")
        touched.add(ch.path)
    return touched


# --------------------------------------------------------------------------
# Promotion. Files are staged under .promote/, then a journal is written
# atomically; the journal's existence is the commit point. Staged files are
# then moved into place and VALID is rewritten last.


def _journal(clean: Sandbox) -> Path:
    return clean.root / PROMOTE_DIR / "JOURNAL"


def recover(clean: Sandbox) -> str | None:
    """Finish or discard an interrupted promote. Returns what was done."""
    stage = clean.root / PROMOTE_DIR
    if not stage.exists():
        return None
    journal = _journal(clean)
    if not journal.exists():
        shutil.rmtree(stage)
        return "discarded"
    entry = json.loads(journal.read_text("utf-8"))
    _apply_journal(clean, entry)
    return "completed"


def _apply_journal(clean: Sandbox, entry: dict) -> None:
    stage = clean.root / PROMOTE_DIR / "files"
    for rel in entry["copy"]:
        staged = stage / rel
        if staged.exists():
            dest = clean.root / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(staged, dest)
    for rel in entry["delete"]:
        path = clean.root / rel
        if path.exists():
            path.unlink()
            _prune_dirs(clean.root, rel)
    _write_file(clean.root / VALID_FILE, (entry["tree"] + "\n").encode("ascii"))
    shutil.rmtree(clean.root / PROMOTE_DIR)


def promote(dirty: Sandbox, clean: Sandbox, state: BuildState | None = None) -> SyncPlan:
    """Make ``clean`` identical to ``dirty`` after a Coherent build.

    ``state`` is the dirty sandbox's build state if the caller already has it.
    """
    if state is None:
        state = dirty.build_state()
    if state.library_verdict != COHERENT or any(not r.verified for r in state.records.values()):
        raise PromoteIncoherent("dirty sandbox build state is not Coherent")
    clean.root.mkdir(parents=True, exist_ok=True)
    recover(clean)
    plan, d_files, c_files, d_idx, c_idx = _diff(dirty, clean)
    stage = clean.root / PROMOTE_DIR / "files"
    digests = {}
    for rel in sorted(plan.copy):
        data = (dirty.root / rel).read_bytes()
        io_stats.bytes_copied += len(data)
        digests[rel] = hashlib.sha256(data).hexdigest()
        d_idx.entries[rel] = (*TreeIndex._key(d_files[rel]), digests[rel])
        _write_file(stage / rel, data)
    # Every copied file was hashed while staging; the rest hit the index.
    new_tree = _tree_digest(d_files, d_idx)
    entry = {"copy": sorted(plan.copy), "delete": sorted(plan.delete), "tree": new_tree}
    _write_file(_journal(clean), json.dumps(entry).encode("utf-8"))
    _apply_journal(clean, entry)
    io_stats.files_written += len(plan.copy)
    io_stats.files_deleted += len(plan.delete)
    for rel, digest in digests.items():
        c_idx.record(rel, digest)
    for rel in plan.delete:
        c_idx.forget(rel)
    c_idx.save()
    d_idx.save(d_files)
    return plan


def is_valid(clean: Sandbox) -> bool:
    """VALID names the current tree hash and no promote is pending."""
    marker = clean.root / VALID_FILE
    if (clean.root / PROMOTE_DIR).exists() or not marker.exists():
        return False
    return marker.read_text("ascii").strip() == tree_hash(clean)
