"""Repository topology and the commit gate.

A repository is a *central* directory (guarded ``master`` branch plus an
admin-only ``stable`` branch), a *frontend* that accepts anything, and a
*publish* directory with the rendered library. Inside ``<central>/.fwiki``
live the clean sandbox (always a fully built, coherent copy of master), the
dirty sandbox where proposals are checked, and the gate logs.
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import os
import secrets
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from fwiki import htmlgen
from fwiki.backends import (
    GATE_ENV,
    Backend,
    BackendError,
    GitBackend,
    PlainDirBackend,
    apply_changes,
    diff_trees,
    open_backend,
    read_source_dir,
    write_source_dir,
)
from fwiki.changes import Action, Change, CommitRequest, IllegalPath, InvalidRequest, is_source_path
from fwiki.depgraph import (
    SOURCE_SUFFIX,
    CycleError,
    DanglingImport,
    DirtySet,
    ManifestRefreshError,
    build_graph,
    compute_dirty,
    list_sources,
    load_manifests,
    refresh_manifests,
)
from fwiki.sandbox import CLEAN, DIRTY, Sandbox, overlay, promote, recover, sync
from fwiki.verifier import COHERENT, BuildState, Diagnostic, admissibility_check, verify_library

CONFIG_FILE = "fwiki.conf"
LOCK_FILE = "gate.lock"
META_DIR = ".fwiki"
CONFIG_KEYS = ("central", "frontend", "publish", "workers", "max_files", "max_bytes", "mirror")
DEFAULT_MAX_FILES = 256
DEFAULT_MAX_BYTES = 8 * 1024 * 1024


class RepoError(Exception):
    pass


class LockBusy(RepoError):
    pass


class SeedIncoherent(RepoError):
    def __init__(self, diagnostics: list[Diagnostic]) -> None:
        super().__init__("seed articles do not form a coherent library:\n" + "\n".join(map(str, diagnostics)))
        self.diagnostics = diagnostics


class AuthFailure(RepoError):
    pass


class NothingToRelease(RepoError):
    pass


@dataclass(frozen=True)
class RepoConfig:
    central: Path
    frontend: Path
    publish: Path
    workers: int = 1
    max_files: int = DEFAULT_MAX_FILES
    max_bytes: int = DEFAULT_MAX_BYTES
    mirror: Path | None = None

    def __post_init__(self) -> None:
        for name in ("central", "frontend", "publish"):
            object.__setattr__(self, name, Path(getattr(self, name)).absolute())
        if self.mirror is not None:
            object.__setattr__(self, "mirror", Path(self.mirror).absolute())
        if self.central == self.frontend:
            raise ValueError("central and frontend repositories must differ")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def dump(self) -> str:
        lines = [
            f"central = {self.central}",
            f"frontend = {self.frontend}",
            f"publish = {self.publish}",
            f"workers = {self.workers}",
            f"max_files = {self.max_files}",
            f"max_bytes = {self.max_bytes}",
        ]
        if self.mirror is not None:
            lines.append(f"mirror = {self.mirror}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> RepoConfig:
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in CONFIG_KEYS:
                raise ValueError(f"{CONFIG_FILE}:{lineno}: unknown or malformed entry {raw!r}")
            values[key] = value.strip()
        missing = {"central", "frontend", "publish"} - values.keys()
        if missing:
            raise ValueError(f"{CONFIG_FILE}: missing keys {sorted(missing)}")
        return cls(
            central=Path(values["central"]),
            frontend=Path(values["frontend"]),
            publish=Path(values["publish"]),
            workers=int(values.get("workers", 1)),
            max_files=int(values.get("max_files", DEFAULT_MAX_FILES)),
            max_bytes=int(values.get("max_bytes", DEFAULT_MAX_BYTES)),
            mirror=Path(values["mirror"]) if values.get("mirror") else None,
        )

    @classmethod
    def load(cls, repo_dir: str | os.PathLike[str]) -> RepoConfig:
        path = Path(repo_dir) / CONFIG_FILE
        if not path.exists():
            raise RepoError(f"{repo_dir} is not an fwiki repository (no {CONFIG_FILE})")
        return cls.parse(path.read_text("utf-8"))


@dataclass
class CommitResult:
    accepted: bool
    commit_id: str | None = None
    diagnostics: list[Diagnostic] = field(default_factory=list)
    verified: list[str] = field(default_factory=list)
    cutoff: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "Accepted" if self.accepted else "Rejected"

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "commit_id": self.commit_id,
            "diagnostics": [d.to_json() for d in self.diagnostics],
            "verified": sorted(self.verified),
            "cutoff": sorted(self.cutoff),
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
        }

    def summary(self) -> str:
        lines = [f"{self.verdict}" + (f" as {self.commit_id}" if self.commit_id else "")]
        lines.append(f"verified: {', '.join(sorted(self.verified)) or '-'}")
        lines.append(f"cut off:  {', '.join(sorted(self.cutoff)) or '-'}")
        lines.extend(f"  {d}" for d in self.diagnostics)
        total = sum(self.timings.values())
        lines.append(f"time: {total * 1000:.1f} ms (" + ", ".join(
            f"{k} {v * 1000:.1f}" for k, v in self.timings.items()) + ")")
        return "\n".join(lines)


def _hash_token(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


class _Timer:
    def __init__(self) -> None:
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


def _diag(kind: str, message: str, article: str = "") -> Diagnostic:
    return Diagnostic(article, 0, 0, kind, message)


class Repository:
    def __init__(self, config: RepoConfig) -> None:
        self.config = config
        self.central = config.central
        self.meta = self.central / META_DIR
        self.backend: Backend = open_backend(self.central, config.frontend)
        self.clean = Sandbox(self.meta / "clean", CLEAN)
        self.dirty = Sandbox(self.meta / "dirty", DIRTY)
        # instrumentation: number of gate runs that reached the build step
        self.builds = 0

    @classmethod
    def open(cls, repo_dir: str | os.PathLike[str]) -> Repository:
        return cls(RepoConfig.load(repo_dir))

    # -- locking ---------------------------------------------------------

    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        fd = os.open(self.central / LOCK_FILE, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise LockBusy(f"another gate run holds {self.central / LOCK_FILE}") from None
            try:
                yield
            finally:
                fcntl.flock(fd, fcntl.LOCK_UN)
        finally:
            os.close(fd)

    # -- the gate --------------------------------------------------------

    def _precheck(self, request: CommitRequest, limits: bool = True) -> list[Diagnostic]:
        try:
            if limits:
                request.validate(self.config.max_files, self.config.max_bytes)
            else:
                request.validate()
        except IllegalPath as exc:
            return [_diag("IllegalPath", str(exc))]
        except InvalidRequest as exc:
            return [_diag("InvalidRequest", str(exc))]
        present = set(list_sources(self.clean.root)) if self.clean.root.exists() else set()
        diags = []
        for ch in request.changes:
            exists = ch.article in present
            if ch.action is Action.ADD and exists:
                diags.append(_diag("InvalidRequest", f"cannot add {ch.path}: it already exists", ch.article))
            elif ch.action is not Action.ADD and not exists:
                diags.append(_diag("InvalidRequest", f"cannot {ch.action.value} {ch.path}: no such article", ch.article))
        return diags

    def gate(
        self, request: CommitRequest, *, commit: bool = True, promote_clean: bool | None = None, limits: bool = True
    ) -> CommitResult:
        """Run the full admissibility pipeline; caller must hold the lock.

        With ``commit`` the accepted change is promoted, committed to master
        and published. Otherwise only the verdict is computed, unless
        ``promote_clean`` asks for the clean sandbox to catch up. ``limits``
        applies the per-request size caps (off for the seed commit).
        """
        if promote_clean is None:
            promote_clean = commit
        timer = _Timer()
        result = CommitResult(False, timings=timer.timings)
        diags = self._precheck(request, limits)
        if diags:
            result.diagnostics = diags
            return self._finish(request, result)
        try:
            with timer.phase("sync"):
                recover(self.clean)
                self.clean.ensure()
                sync(self.clean, self.dirty)
            with timer.phase("overlay"):
                overlay(self.dirty, request)
            with timer.phase("manifests"):
                try:
                    refreshed = refresh_manifests(self.dirty.root, self.dirty.deps_dir)
                except ManifestRefreshError as exc:
                    result.diagnostics = sorted(
                        Diagnostic(n, e.line, e.column, e.kind, e.message) for n, e in exc.errors.items()
                    )
                    return self._finish(request, result)
            with timer.phase("graph"):
                manifests = load_manifests(self.dirty.deps_dir)
                try:
                    graph = build_graph(manifests.values())
                except DanglingImport as exc:
                    result.diagnostics = [
                        Diagnostic(a, 2, 1, "DanglingImport", f"{a} imports {m}, which does not exist")
                        for a, m in exc.pairs
                    ]
                    return self._finish(request, result)
                except CycleError as exc:
                    result.diagnostics = [
                        Diagnostic(exc.cycle[0], 2, 1, "ImportCycle", str(exc))
                    ]
                    return self._finish(request, result)
                present = set(manifests)
                dirty_set = compute_dirty(graph, refreshed & present, refreshed - present)
            with timer.phase("build"):
                self.builds += 1
                state = self.dirty.build_state()
                verdict = admissibility_check(graph, state, dirty_set, self.dirty, self.config.workers)
            if verdict.report is not None:
                result.verified = sorted(verdict.report.verified)
                result.cutoff = sorted(verdict.report.cutoff)
            if not verdict.admissible:
                result.diagnostics = verdict.diagnostics
                return self._finish(request, result)
            with timer.phase("render"):
                htmlgen.render_into(self.dirty.root, dirty_set.influenced, verdict.state, dirty_set.deleted)
            result.accepted = True
            if promote_clean:
                with timer.phase("promote"):
                    promote(self.dirty, self.clean, verdict.state)
            if commit:
                with timer.phase("commit"):
                    result.commit_id = self.backend.commit(list(request.changes), request.author, request.message)
                with timer.phase("publish"):
                    self.post_commit(result.commit_id, dirty_set)
        except (OSError, BackendError) as exc:
            result.accepted = False
            result.commit_id = None
            result.diagnostics = [_diag("Infrastructure", f"{type(exc).__name__}: {exc}")]
        return self._finish(request, result)

    def _finish(self, request: CommitRequest, result: CommitResult) -> CommitResult:
        self.meta.mkdir(parents=True, exist_ok=True)
        report = {"request": {"author": request.author, "message": request.message,
                              "paths": [c.path for c in request.changes]}, "result": result.to_json()}
        (self.meta / "last_gate.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        with open(self.meta / "gate.log", "a", encoding="utf-8") as log:
            log.write(json.dumps(report, sort_keys=True) + "\n")
        return result

    def submit(self, request: CommitRequest) -> CommitResult:
        with self.lock():
            return self.gate(request, commit=True)

    # -- post-commit -----------------------------------------------------

    def _commit_dirty_set(self, commit_id: str) -> DirtySet:
        history = self.backend.log()
        idx = history.index(commit_id)
        parent_tree = self.backend.tree(history[idx - 1]) if idx > 0 else {}
        changes = diff_trees(parent_tree, self.backend.tree(commit_id))
        graph = build_graph(load_manifests(self.clean.deps_dir).values())
        changed = {c.article for c in changes if c.action is not Action.DELETE}
        deleted = {c.article for c in changes if c.action is Action.DELETE}
        return compute_dirty(graph, changed, deleted)

    def post_commit(self, commit_id: str, dirty_set: DirtySet | None = None) -> set[str]:
        """Publish the commit's pages, mirror sources, append a notification.

        Failures are logged; the commit itself is never undone.
        """
        written: set[str] = set()
        try:
            if dirty_set is None:
                dirty_set = self._commit_dirty_set(commit_id)
            written = htmlgen.publish(dirty_set, self.clean, self.config.publish)
            status = f"published {len(written)} page(s)"
        except Exception as exc:  # presentation must not undo a commit
            status = f"publish failed: {type(exc).__name__}: {exc}"
        if self.config.mirror is not None:
            try:
                write_source_dir(self.config.mirror, self.backend.tree(commit_id))
            except OSError as exc:
                status += f"; mirror failed: {exc}"
        with open(self.meta / "notify.log", "a", encoding="utf-8") as log:
            log.write(f"{commit_id} {status}\n")
        return written

    def catch_up(self, commit_id: str) -> CommitResult | None:
        """Bring the clean sandbox to ``commit_id`` if it was committed behind the gate's back."""
        clean_tree = read_source_dir(self.clean.root)
        changes = diff_trees(clean_tree, self.backend.tree(commit_id))
        if not changes:
            return None
        request = CommitRequest("post-commit", f"catch up with {commit_id}", tuple(changes))
        return self.gate(request, commit=False, promote_clean=True)

    # -- frontend, stable, status ---------------------------------------

    def receive_from_frontend(self, author: str = "frontend") -> CommitResult | None:
        changes = self.backend.frontend_changes()
        if not changes:
            return None
        request = CommitRequest(author, "push via frontend", tuple(changes))
        try:
            return self.submit(request)
        finally:
            self.backend.reset_frontend()

    def release_stable(self, admin_token: str) -> str:
        tokens_file = self.meta / "admin_tokens"
        known = set(tokens_file.read_text().split()) if tokens_file.exists() else set()
        if _hash_token(admin_token) not in known:
            raise AuthFailure("unknown admin token")
        with self.lock():
            master = self.backend.head("master")
            stable = self.backend.head("stable")
            if master is None or master == stable:
                raise NothingToRelease("stable already points at master")
            if stable is not None and not self.backend.is_ancestor(stable, master):
                raise RepoError("stable is not an ancestor of master")
            self.backend.set_branch("stable", master)
            releases = [t for t in self.backend.tags() if t.startswith("release-")]
            n = max((int(t.split("-", 1)[1]) for t in releases), default=0) + 1
            self.backend.tag(f"release-{n}", master)
        return master

    def status(self) -> dict:
        recover(self.clean)
        state = self.clean.build_state()
        last = self.meta / "last_gate.json"
        return {
            "backend": self.backend.kind,
            "library_verdict": state.library_verdict,
            "articles": len(state.records),
            "master": self.backend.head("master"),
            "stable": self.backend.head("stable"),
            "tags": self.backend.tags(),
            "last_gate": json.loads(last.read_text()) if last.exists() else None,
        }

    def verify(self, full: bool = False) -> tuple[BuildState, list[str]]:
        """Re-check master. ``full`` ignores recorded state entirely.

        The incremental mode re-verifies, in a scratch copy of the clean
        sandbox, whatever the recorded state does not vouch for.
        """
        head = self.backend.head()
        tree = self.backend.tree(head) if head else {}
        if full:
            sources = {p[: -len(SOURCE_SUFFIX)]: data for p, data in tree.items()}
            state, report = verify_library(sources, self.config.workers)
            return state, report.verified
        with tempfile.TemporaryDirectory() as tmp:
            scratch = Sandbox(Path(tmp) / "s", DIRTY)
            recover(self.clean)
            self.clean.ensure()
            sync(self.clean, scratch)
            write_source_dir(scratch.root, tree)
            refreshed = refresh_manifests(scratch.root, scratch.deps_dir)
            manifests = load_manifests(scratch.deps_dir)
            graph = build_graph(manifests.values())
            prior = scratch.build_state()
            stale = {
                n for n in graph.nodes
                if n not in prior.records or prior.records[n].source_hash != manifests[n].source_hash
            }
            dirty_set = compute_dirty(graph, stale | (refreshed & set(manifests)), refreshed - set(manifests))
            verdict = admissibility_check(graph, prior, dirty_set, scratch, self.config.workers)
            state = verdict.state if verdict.state is not None else prior
            return state, [] if verdict.report is None else verdict.report.verified

    def render(self, full: bool = False) -> set[str]:
        recover(self.clean)
        state = self.clean.build_state()
        if not full:
            return htmlgen.publish(DirtySet(frozenset(), frozenset()), self.clean, self.config.publish, full=True)
        with tempfile.TemporaryDirectory() as tmp:
            scratch = Sandbox(Path(tmp) / "s", DIRTY)
            sync(self.clean, scratch)
            shutil.rmtree(scratch.html_dir, ignore_errors=True)
            htmlgen.render_into(scratch.root, state.records, state)
            return htmlgen.publish(DirtySet(frozenset(), frozenset()), scratch, self.config.publish, full=True)


# --------------------------------------------------------------------------
# Entry points


def init_repo(
    config: RepoConfig,
    seed_dir: str | os.PathLike[str] | None = None,
    *,
    backend: str = "plain",
    admin_token: str | None = None,
) -> tuple[Repository, str]:
    """Create central, frontend and publish dirs from coherent seed articles.

    Returns the repository and the admin token (generated if not given).
    """
    for d in (config.central, config.frontend):
        if d.exists() and any(d.iterdir()):
            raise RepoError(f"{d} exists and is not empty")
    seed: dict[str, bytes] = {}
    if seed_dir is not None:
        for p in sorted(Path(seed_dir).iterdir()):
            if p.is_file() and p.suffix == SOURCE_SUFFIX:
                if not is_source_path(p.name):
                    raise RepoError(f"seed file {p.name} is not a valid article file name")
                seed[p.name] = p.read_bytes()
    created = [d for d in (config.central, config.frontend) if not d.exists()]
    config.central.mkdir(parents=True, exist_ok=True)
    try:
        (config.central / CONFIG_FILE).write_text(config.dump())
        if backend == "git":
            GitBackend(config.central, config.frontend).create()
        elif backend == "plain":
            PlainDirBackend(config.central, config.frontend).create()
        else:
            raise RepoError(f"unknown backend {backend!r}")
        repo = Repository(config)
        repo.meta.mkdir(parents=True, exist_ok=True)
        token = admin_token or secrets.token_hex(16)
        (repo.meta / "admin_tokens").write_text(_hash_token(token) + "\n")
        repo.clean.ensure()
        repo.dirty.ensure()
        request = CommitRequest(
            "fwiki", "initial library", tuple(Change(p, Action.ADD, data) for p, data in seed.items())
        )
        with repo.lock():
            result = repo.gate(request, commit=True, limits=False)
        if not result.accepted:
            raise SeedIncoherent(result.diagnostics)
        repo.backend.set_branch("stable", result.commit_id)
        repo.backend.sync_worktree()
        repo.backend.clone_frontend()
        return repo, token
    except BaseException:
        _remove_created(config, created)
        raise


def _remove_created(config: RepoConfig, created: list[Path]) -> None:
    for d in created:
        shutil.rmtree(d, ignore_errors=True)
    if config.central not in created:
        for child in config.central.iterdir():
            if child.is_dir():
                shutil.rmtree(child, ignore_errors=True)
            else:
                child.unlink()


def submit(config: RepoConfig, request: CommitRequest) -> CommitResult:
    repo = Repository(config)
    result = repo.submit(request)
    if result.accepted and isinstance(repo.backend, PlainDirBackend):
        repo.backend.sync_worktree()
    return result


def hook_pre_commit(config: RepoConfig, out=sys.stderr) -> int:
    if os.environ.get(GATE_ENV):
        return 0
    repo = Repository(config)
    changes = repo.backend.staged_changes()
    request = CommitRequest("pre-commit", "staged changes", tuple(changes))
    with repo.lock():
        result = repo.gate(request, commit=False)
    for d in result.diagnostics:
        print(d, file=out)
    return 0 if result.accepted else 1


def hook_post_commit(config: RepoConfig, commit_id: str | None = None, out=sys.stderr) -> int:
    if os.environ.get(GATE_ENV):
        return 0
    repo = Repository(config)
    commit_id = commit_id or repo.backend.head()
    if commit_id is None:
        return 0
    with repo.lock():
        caught = repo.catch_up(commit_id)
        if caught is not None and not caught.accepted:
            # Committed around the gate: keep the commit, report loudly.
            for d in caught.diagnostics:
                print(d, file=out)
            with open(repo.meta / "notify.log", "a", encoding="utf-8") as log:
                log.write(f"{commit_id} INCOHERENT commit bypassed the gate\n")
            return 1
        repo.post_commit(commit_id)
    return 0


def hook_post_receive(config: RepoConfig, out=sys.stderr) -> int:
    repo = Repository(config)
    result = repo.receive_from_frontend()
    if result is None:
        return 0
    print(result.summary(), file=out)
    if result.accepted and isinstance(repo.backend, PlainDirBackend):
        repo.backend.sync_worktree()
    return 0 if result.accepted else 1


def render_scratch(tree: dict[str, bytes], out_dir: str | os.PathLike[str], state: BuildState | None = None) -> None:
    """Render a source tree from nothing into ``out_dir``.

    ``state`` may carry an already computed scratch verification of ``tree``.
    """
    sources = {p[: -len(SOURCE_SUFFIX)]: data for p, data in tree.items()}
    if state is None:
        state, _ = verify_library(sources)
    if state.library_verdict != COHERENT:
        raise RepoError("cannot render an incoherent library")
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        write_source_dir(root, tree)
        htmlgen.render_into(root, sources, state)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for page in (root / "html").glob("*.html"):
            shutil.copyfile(page, out / page.name)


__all__ = [
    "AuthFailure",
    "CommitResult",
    "LockBusy",
    "NothingToRelease",
    "RepoConfig",
    "RepoError",
    "Repository",
    "SeedIncoherent",
    "apply_changes",
    "hook_post_commit",
    "hook_post_receive",
    "hook_pre_commit",
    "init_repo",
    "render_scratch",
    "submit",
]
