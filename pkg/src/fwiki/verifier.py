"""Article verification, build records, and minimal parallel re-verification.

An article's *export signature* is its interface: definition bindings with
their evaluated values and theorem statements. Justifications are not part
of it, so editing a proof never forces dependents to be re-checked.
Dependents are also left alone when an import's signature changed in ways
they cannot observe (for instance a theorem appended to the import).
"""

from __future__ import annotations

import json
import multiprocessing
import os
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from fwiki.depgraph import (
    SOURCE_SUFFIX,
    DependencyGraph,
    DepManifest,
    DirtySet,
    build_graph,
    load_manifests,
    manifest_from_source,
    sha256_bytes,
    topo_order,
)
from fwiki.lang import (
    Article,
    Definition,
    EvalError,
    Overflow,
    ParseError,
    Theorem,
    evaluate_expr,
    format_statement,
    holds,
    identifiers,
    parse_article,
    parse_environ,
)

VERIFIED = "Verified"
FAILED = "Failed"
COHERENT = "Coherent"
INCOHERENT = "Incoherent"
STATE_FILE = Path("state") / "build.json"

DIAGNOSTIC_KINDS = frozenset(
    {
        "UnboundSymbol",
        "UnresolvedRef",
        "UndeclaredImportRef",
        "ForwardRef",
        "FalseStatement",
        "DefCycle",
        "Overflow",
        "DuplicateLabel",
        # front-end and gate level
        "ParseError",
        "NameMismatch",
        "DuplicateSymbol",
        "DuplicateImport",
        "SelfImport",
        "DanglingImport",
        "ImportCycle",
        "IllegalPath",
        "InvalidRequest",
        "Infrastructure",
    }
)


def canonical_json(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


@dataclass(frozen=True, order=True)
class Diagnostic:
    article: str
    line: int
    column: int
    kind: str
    message: str

    def to_json(self) -> dict:
        return {
            "article": self.article,
            "column": self.column,
            "kind": self.kind,
            "line": self.line,
            "message": self.message,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> Diagnostic:
        return cls(d["article"], d["line"], d["column"], d["kind"], d["message"])

    def __str__(self) -> str:
        where = f"{self.article}.fml:{self.line}:{self.column}" if self.article else "gate"
        return f"{where}: {self.kind}: {self.message}"


@dataclass(frozen=True)
class ExportSignature:
    """Sorted ``(label, kind, payload)`` entries plus their hash.

    ``kind`` is ``"def"`` with payload ``(symbol, value)`` or ``"thm"`` with
    the canonical statement text as payload.
    """

    article: str
    entries: tuple[tuple, ...]
    sig_hash: str
    bindings: Mapping[str, int] = field(compare=False, repr=False)
    labels: frozenset[str] = field(compare=False, repr=False)

    @classmethod
    def build(cls, article: str, entries: Iterable[tuple]) -> ExportSignature:
        entries = tuple(sorted(entries, key=lambda e: e[0]))
        bindings = {e[2][0]: e[2][1] for e in entries if e[1] == "def"}
        return cls(
            article,
            entries,
            sha256_bytes(canonical_json(_entries_json(entries))),
            bindings,
            frozenset(e[0] for e in entries),
        )

    def to_json(self) -> dict:
        return {"entries": _entries_json(self.entries), "sig_hash": self.sig_hash}

    @classmethod
    def from_json(cls, article: str, d: Mapping) -> ExportSignature:
        entries = [
            (label, kind, (payload[0], payload[1]) if kind == "def" else payload)
            for label, kind, payload in d["entries"]
        ]
        # The stored hash is trusted: build.json is only ever written by us.
        bindings = {e[2][0]: e[2][1] for e in entries if e[1] == "def"}
        return cls(article, tuple(entries), d["sig_hash"], bindings, frozenset(e[0] for e in entries))


def _entries_json(entries: Iterable[tuple]) -> list:
    return [[label, kind, list(payload) if kind == "def" else payload] for label, kind, payload in entries]


@dataclass(frozen=True)
class BuildRecord:
    article: str
    source_hash: str
    import_sigs: Mapping[str, str]
    export: ExportSignature | None
    verdict: str
    diagnostics: tuple[Diagnostic, ...] = ()

    @property
    def verified(self) -> bool:
        return self.verdict == VERIFIED

    def to_json(self) -> dict:
        return {
            "article": self.article,
            "diagnostics": [d.to_json() for d in self.diagnostics],
            "export": None if self.export is None else self.export.to_json(),
            "import_sigs": dict(self.import_sigs),
            "source_hash": self.source_hash,
            "verdict": self.verdict,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> BuildRecord:
        export = None if d["export"] is None else ExportSignature.from_json(d["article"], d["export"])
        return cls(
            d["article"],
            d["source_hash"],
            dict(d["import_sigs"]),
            export,
            d["verdict"],
            tuple(Diagnostic.from_json(x) for x in d["diagnostics"]),
        )


@dataclass(frozen=True)
class BuildState:
    records: Mapping[str, BuildRecord] = field(default_factory=dict)
    library_verdict: str = COHERENT

    def to_bytes(self) -> bytes:
        payload = {
            "library_verdict": self.library_verdict,
            "records": {name: rec.to_json() for name, rec in self.records.items()},
        }
        return canonical_json(payload) + b"\n"

    @classmethod
    def from_bytes(cls, data: bytes) -> BuildState:
        d = json.loads(data)
        records = {name: BuildRecord.from_json(r) for name, r in d["records"].items()}
        return cls(records, d["library_verdict"])

    @classmethod
    def load(cls, root: str | os.PathLike[str]) -> BuildState:
        path = Path(root) / STATE_FILE
        if not path.exists():
            return cls()
        return cls.from_bytes(path.read_bytes())

    def save(self, root: str | os.PathLike[str]) -> None:
        path = Path(root) / STATE_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(".build.json.tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)


# --------------------------------------------------------------------------
# Single-article verification


class _Poisoned:
    """Marker for a local definition whose body failed; uses stay silent."""


_POISON = _Poisoned()


def verify_article(
    article: Article,
    import_exports: Mapping[str, ExportSignature],
    source_hash: str = "",
) -> BuildRecord:
    """Check link coherence and truth of every item against the imports.

    All problems are collected; failure is reported through the verdict.
    """
    name = article.name
    imports = article.environ.imports
    diags: list[Diagnostic] = []

    def report(span, kind: str, message: str) -> None:
        diags.append(Diagnostic(name, span.line, span.column, kind, message))

    import_sigs = {}
    for imp in imports:
        exp = import_exports.get(imp)
        if exp is None:
            diags.append(Diagnostic(name, 2, 1, "UnresolvedRef", f"no verified export for import {imp!r}"))
        else:
            import_sigs[imp] = exp.sig_hash

    local_symbols: dict[str, object] = {}
    all_symbols = {it.symbol for it in article.items if isinstance(it, Definition)}
    labels_so_far: set[str] = set()
    all_labels = {it.label for it in article.items}
    entries: list[tuple] = []

    def resolve(expr, defining: str | None) -> dict[str, int] | None:
        """Bindings for ``expr``; None if any identifier failed to resolve."""
        bindings: dict[str, int] = {}
        ok = True
        for ident in identifiers(expr):
            x = ident.name
            if x in bindings:
                continue
            if x in local_symbols:
                value = local_symbols[x]
                if value is _POISON:
                    ok = False
                    continue
                bindings[x] = value
                continue
            for imp in imports:
                exp = import_exports.get(imp)
                if exp is not None and x in exp.bindings:
                    bindings[x] = exp.bindings[x]
                    break
            else:
                ok = False
                if x == defining:
                    report(ident.span, "DefCycle", f"definition of {x!r} refers to itself")
                elif x in all_symbols:
                    report(ident.span, "ForwardRef", f"symbol {x!r} is defined later in this article")
                else:
                    report(ident.span, "UnboundSymbol", f"symbol {x!r} is not defined here or in any import")
        return bindings if ok else None

    def evaluate(expr, bindings) -> int | None:
        try:
            return evaluate_expr(expr, bindings)
        except Overflow as exc:
            report(exc.span, "Overflow", "arithmetic leaves the 64-bit signed range")
        except EvalError as exc:  # pragma: no cover - resolve() guarantees bindings
            report(expr.span, "UnboundSymbol", str(exc))
        return None

    for item in article.items:
        if isinstance(item, Definition):
            bindings = resolve(item.body, item.symbol)
            value = None if bindings is None else evaluate(item.body, bindings)
            if value is None:
                local_symbols[item.symbol] = _POISON
            else:
                local_symbols[item.symbol] = value
                entries.append((item.label, "def", (item.symbol, value)))
        else:
            _check_refs(item, imports, import_exports, labels_so_far, all_labels, report)
            lb = resolve(item.lhs, None)
            rb = resolve(item.rhs, None)
            if lb is not None and rb is not None:
                left = evaluate(item.lhs, lb)
                right = evaluate(item.rhs, rb)
                if left is not None and right is not None and not holds(left, item.relation, right):
                    report(
                        item.span,
                        "FalseStatement",
                        f"theorem {item.label!r} is false: {format_statement(item)} "
                        f"evaluates to {left} {item.relation} {right}",
                    )
            entries.append((item.label, "thm", format_statement(item)))
        labels_so_far.add(item.label)

    if diags:
        return BuildRecord(name, source_hash, import_sigs, None, FAILED, tuple(sorted(diags)))
    return BuildRecord(name, source_hash, import_sigs, ExportSignature.build(name, entries), VERIFIED)


def _check_refs(thm: Theorem, imports, import_exports, labels_so_far, all_labels, report) -> None:
    for ref in thm.refs:
        if ref.article is None:
            if ref.label in labels_so_far:
                continue
            if ref.label in all_labels:
                report(ref.span, "ForwardRef", f"reference to {ref.label!r}, which is not earlier in the article")
            else:
                report(ref.span, "UnresolvedRef", f"no item labelled {ref.label!r} in this article")
        elif ref.article not in imports:
            report(
                ref.span,
                "UndeclaredImportRef",
                f"reference to {ref.article}:{ref.label} but {ref.article!r} is not imported",
            )
        else:
            exp = import_exports.get(ref.article)
            if exp is not None and ref.label not in exp.labels:
                report(ref.span, "UnresolvedRef", f"article {ref.article!r} has no item labelled {ref.label!r}")


def failed_from_parse_error(name: str, source_hash: str, source: str, exc: ParseError) -> BuildRecord:
    try:
        imports = parse_environ(source).imports
    except ParseError:
        imports = ()
    diag = Diagnostic(name, exc.line, exc.column, exc.kind, exc.message)
    # Import sigs are unknown for a broken article; keys still follow the header.
    return BuildRecord(name, source_hash, dict.fromkeys(imports, ""), None, FAILED, (diag,))


def verify_source(name: str, data: bytes, import_exports: Mapping[str, ExportSignature]) -> BuildRecord:
    """Parse and verify raw source bytes. Runs inside build workers."""
    digest = sha256_bytes(data)
    text = data.decode("utf-8", errors="replace")
    try:
        article = parse_article(text, name)
    except ParseError as exc:
        return failed_from_parse_error(name, digest, text, exc)
    return verify_article(article, import_exports, digest)


def _verify_job(job: tuple[str, bytes, dict]) -> BuildRecord:
    return verify_source(*job)


def observed_interface(article: Article) -> tuple[frozenset[str], frozenset[tuple[str, str]]]:
    """What an article can see of its imports.

    Returns the identifiers it may resolve through imports and the
    ``(article, label)`` pairs it cites remotely.
    """
    local: set[str] = set()
    free: set[str] = set()
    refs: set[tuple[str, str]] = set()
    for item in article.items:
        exprs = (item.body,) if isinstance(item, Definition) else (item.lhs, item.rhs)
        for expr in exprs:
            free.update(i.name for i in identifiers(expr) if i.name not in local)
        if isinstance(item, Definition):
            local.add(item.symbol)
        else:
            refs.update((r.article, r.label) for r in item.refs if r.article is not None)
    return frozenset(free), frozenset(refs)


def same_observation(
    article: Article, imported: str, old: ExportSignature, new: ExportSignature
) -> bool:
    free, refs = observed_interface(article)
    for x in free:
        if old.bindings.get(x) != new.bindings.get(x):
            return False
    for art, label in refs:
        if art == imported and (label in old.labels) != (label in new.labels):
            return False
    return True


# --------------------------------------------------------------------------
# Planning and execution


@dataclass(frozen=True)
class BuildPlan:
    graph: DependencyGraph
    state: BuildState
    dirty: DirtySet
    layers: tuple[frozenset[str], ...]

    def __len__(self) -> int:
        return sum(len(layer) for layer in self.layers)


@dataclass
class BuildReport:
    verified: list[str] = field(default_factory=list)
    cutoff: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    library_verdict: str = COHERENT

    def to_json(self) -> dict:
        return {
            "cutoff": sorted(self.cutoff),
            "failed": sorted(self.failed),
            "library_verdict": self.library_verdict,
            "skipped": sorted(self.skipped),
            "verified": sorted(self.verified),
        }


def plan_build(graph: DependencyGraph, state: BuildState, dirty: DirtySet) -> BuildPlan:
    """Layers of the influenced subgraph, imports first.

    Which influenced articles actually get verified is decided while
    executing: changed articles always, the rest only if they can observe a
    change in an import's interface.
    """
    layers = tuple(topo_order(graph, dirty.influenced))
    return BuildPlan(graph, state, dirty, layers)


class _Pool:
    """Lazily started process pool; one worker count means inline."""

    def __init__(self, workers: int) -> None:
        self.workers = workers
        self._executor: Executor | None = None

    def map(self, jobs: list[tuple]) -> list[BuildRecord]:
        if self.workers == 1 or len(jobs) < 2:
            return [_verify_job(j) for j in jobs]
        if self._executor is None:
            self._executor = ProcessPoolExecutor(
                max_workers=self.workers, mp_context=multiprocessing.get_context("fork")
            )
        chunk = max(1, len(jobs) // (self.workers * 4))
        return list(self._executor.map(_verify_job, jobs, chunksize=chunk))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None


def execute_plan(
    plan: BuildPlan,
    sources: Mapping[str, bytes],
    manifests: Mapping[str, DepManifest],
    workers: int = 1,
) -> tuple[BuildState, BuildReport]:
    """Run a plan over in-memory sources. Pure apart from worker processes."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    graph, prior, dirty = plan.graph, plan.state, plan.dirty
    records: dict[str, BuildRecord] = {n: r for n, r in prior.records.items() if n in graph.nodes}
    report = BuildReport()
    broken: set[str] = set()
    pool = _Pool(workers)
    try:
        for layer in plan.layers:
            jobs = []
            for name in sorted(layer):
                imports = graph.imports(name)
                if imports & broken:
                    report.skipped.append(name)
                    broken.add(name)
                    continue
                if name in dirty.changed or _needs_rebuild(name, records, prior, graph, sources, manifests):
                    exports = {i: records[i].export for i in sorted(imports)}
                    jobs.append((name, sources[name], exports))
                else:
                    rec = records[name]
                    fresh = {i: records[i].export.sig_hash for i in sorted(imports)}
                    if fresh != dict(rec.import_sigs):
                        records[name] = replace(rec, import_sigs=fresh)
                    report.cutoff.append(name)
            for rec in pool.map(jobs):
                records[rec.article] = rec
                report.verified.append(rec.article)
                if not rec.verified:
                    report.failed.append(rec.article)
                    broken.add(rec.article)
    finally:
        pool.close()
    verdict = library_verdict(records, graph, manifests)
    report.library_verdict = verdict
    ordered = {n: records[n] for n in sorted(records)}
    return BuildState(ordered, verdict), report


def _needs_rebuild(name, records, prior, graph, sources, manifests) -> bool:
    rec = records.get(name)
    if rec is None or not rec.verified or rec.export is None:
        return True
    if rec.source_hash != manifests[name].source_hash:
        return True
    imports = graph.imports(name)
    if set(rec.import_sigs) != set(imports):
        return True
    article = None
    for imp in sorted(imports):
        new = records[imp].export
        if new.sig_hash == rec.import_sigs[imp]:
            continue
        old_rec = prior.records.get(imp)
        old = None if old_rec is None else old_rec.export
        if old is None or old.sig_hash != rec.import_sigs[imp]:
            return True
        if article is None:
            try:
                article = parse_article(sources[name].decode("utf-8"), name)
            except (ParseError, UnicodeDecodeError):
                return True
        if not same_observation(article, imp, old, new):
            return True
    return False


def library_verdict(
    records: Mapping[str, BuildRecord], graph: DependencyGraph, manifests: Mapping[str, DepManifest]
) -> str:
    """Coherent iff every article has a fresh Verified record."""
    if set(records) != set(graph.nodes):
        return INCOHERENT
    for name, rec in records.items():
        if not rec.verified or rec.source_hash != manifests[name].source_hash:
            return INCOHERENT
        expected = {i: records[i].export.sig_hash for i in graph.imports(name) if records[i].export}
        if dict(rec.import_sigs) != expected or len(expected) != len(graph.imports(name)):
            return INCOHERENT
    return COHERENT


def read_sources(root: Path, names: Iterable[str]) -> dict[str, bytes]:
    return {n: (root / f"{n}{SOURCE_SUFFIX}").read_bytes() for n in names}


def run_build(plan: BuildPlan, workers: int, sandbox) -> tuple[BuildState, BuildReport]:
    """Execute ``plan`` inside ``sandbox`` and persist the new build state.

    ``sandbox`` needs a ``root`` directory holding sources and ``deps/``.
    """
    root = Path(sandbox.root)
    manifests = load_manifests(root / "deps")
    needed = set().union(*plan.layers) if plan.layers else set()
    sources = _LazySources(root, needed)
    state, report = execute_plan(plan, sources, manifests, workers)
    state.save(root)
    return state, report


class _LazySources(Mapping):
    """Reads a source only when the executor asks for it."""

    def __init__(self, root: Path, names: set[str]) -> None:
        self._root = root
        self._names = names
        self._cache: dict[str, bytes] = {}

    def __getitem__(self, name: str) -> bytes:
        if name not in self._cache:
            self._cache[name] = (self._root / f"{name}{SOURCE_SUFFIX}").read_bytes()
        return self._cache[name]

    def __iter__(self):
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)


@dataclass
class Admissibility:
    admissible: bool
    diagnostics: list[Diagnostic]
    state: BuildState | None = None
    report: BuildReport | None = None


def admissibility_check(
    graph: DependencyGraph, state: BuildState, dirty: DirtySet, sandbox, workers: int = 1
) -> Admissibility:
    """Gate verdict: the build over ``dirty`` must end Coherent and no
    deleted article may still be imported."""
    dangling = [
        Diagnostic(a, 2, 1, "DanglingImport", f"{a} imports deleted article {d}")
        for d in sorted(dirty.deleted)
        for a in sorted(graph.nodes)
        if d in graph.imports(a)
    ]
    if dangling:
        return Admissibility(False, dangling)
    plan = plan_build(graph, state, dirty)
    new_state, report = run_build(plan, workers, sandbox)
    if new_state.library_verdict == COHERENT:
        return Admissibility(True, [], new_state, report)
    diags = sorted(d for name in report.failed for d in new_state.records[name].diagnostics)
    if not diags:
        diags.append(Diagnostic("", 0, 0, "Infrastructure", "build state incoherent after build"))
    return Admissibility(False, diags, new_state, report)


def verify_library(sources: Mapping[str, bytes], workers: int = 1) -> tuple[BuildState, BuildReport]:
    """Verify every article from scratch, ignoring any recorded state.

    Raises ParseError-derived or GraphError exceptions when the library
    cannot even be assembled into a graph.
    """
    manifests = {name: manifest_from_source(data, name) for name, data in sources.items()}
    graph = build_graph(manifests.values())
    dirty = DirtySet(frozenset(graph.nodes), frozenset(graph.nodes))
    return execute_plan(plan_build(graph, BuildState(), dirty), sources, manifests, workers)
