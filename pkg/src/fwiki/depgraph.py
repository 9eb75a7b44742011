"""Dependency manifests, the library DAG, and change propagation.

Each article ``<name>.fml`` gets a manifest ``deps/<name>.d``::

    article <name>
    hash <sha256 of the source bytes>
    dep <imported-name>

Manifests are refreshed by content hash only, never by timestamp.
"""

from __future__ import annotations

import hashlib
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from fwiki.lang import NameMismatch, ParseError, is_article_name, scan_header

SOURCE_SUFFIX = ".fml"
MANIFEST_SUFFIX = ".d"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class DepManifest:
    article: str
    deps: tuple[str, ...]
    source_hash: str

    def serialize(self) -> bytes:
        lines = [f"article {self.article}", f"hash {self.source_hash}"]
        lines.extend(f"dep {d}" for d in self.deps)
        return ("\n".join(lines) + "\n").encode("ascii")

    @classmethod
    def parse(cls, data: bytes) -> DepManifest:
        lines = data.decode("ascii").split("\n")
        if lines[-1] != "" or len(lines) < 3:
            raise ValueError("manifest must be LF-terminated with article and hash lines")
        lines.pop()
        tag, _, article = lines[0].partition(" ")
        htag, _, source_hash = lines[1].partition(" ")
        if tag != "article" or htag != "hash" or len(source_hash) != 64:
            raise ValueError("malformed manifest header")
        deps = []
        for line in lines[2:]:
            dtag, _, dep = line.partition(" ")
            if dtag != "dep" or not dep:
                raise ValueError(f"malformed manifest line {line!r}")
            deps.append(dep)
        if deps != sorted(set(deps)):
            raise ValueError("manifest deps must be sorted and unique")
        return cls(article, tuple(deps), source_hash)


class ManifestRefreshError(Exception):
    """One or more articles could not be scanned; others were refreshed."""

    def __init__(self, errors: Mapping[str, Exception], refreshed: set[str]) -> None:
        names = ", ".join(sorted(errors))
        super().__init__(f"could not extract dependencies of: {names}")
        self.errors = dict(errors)
        self.refreshed = refreshed


def manifest_from_source(data: bytes, name: str) -> DepManifest:
    """Build a manifest from raw source bytes of article ``name``."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(1, 1, f"source is not valid UTF-8: {exc.reason}") from None
    header_name, environ = scan_header(text)
    if header_name != name:
        raise NameMismatch(1, 1, f"article header names {header_name!r} but file is {name}{SOURCE_SUFFIX}")
    return DepManifest(name, tuple(sorted(set(environ.imports))), sha256_bytes(data))


def extract_deps(article_path: str | os.PathLike[str]) -> DepManifest:
    path = Path(article_path)
    return manifest_from_source(path.read_bytes(), path.name[: -len(SOURCE_SUFFIX)])


def list_sources(library_dir: Path) -> dict[str, Path]:
    """Article name -> path for every well-named ``.fml`` file at the top level."""
    out = {}
    for entry in os.scandir(library_dir):
        if entry.is_file() and entry.name.endswith(SOURCE_SUFFIX):
            name = entry.name[: -len(SOURCE_SUFFIX)]
            if is_article_name(name):
                out[name] = Path(entry.path)
    return out


def load_manifests(manifest_dir: str | os.PathLike[str]) -> dict[str, DepManifest]:
    out = {}
    mdir = Path(manifest_dir)
    if not mdir.is_dir():
        return out
    for entry in os.scandir(mdir):
        if entry.name.endswith(MANIFEST_SUFFIX):
            try:
                manifest = DepManifest.parse(Path(entry.path).read_bytes())
            except ValueError:
                continue  # unreadable manifests count as missing
            out[manifest.article] = manifest
    return out


def refresh_manifests(library_dir: str | os.PathLike[str], manifest_dir: str | os.PathLike[str]) -> set[str]:
    """Rewrite manifests whose article changed; remove those of deleted articles.

    Returns the set of article names whose manifest was written or removed.
    Articles whose header does not parse lose their manifest and are reported
    together through ManifestRefreshError once every article was processed.
    """
    library_dir = Path(library_dir)
    manifest_dir = Path(manifest_dir)
    manifest_dir.mkdir(parents=True, exist_ok=True)
    stored = load_manifests(manifest_dir)
    sources = list_sources(library_dir)
    refreshed: set[str] = set()
    errors: dict[str, Exception] = {}
    for name in sorted(sources):
        data = sources[name].read_bytes()
        digest = sha256_bytes(data)
        old = stored.get(name)
        if old is not None and old.source_hash == digest:
            continue
        target = manifest_dir / f"{name}{MANIFEST_SUFFIX}"
        try:
            manifest = manifest_from_source(data, name)
        except ParseError as exc:
            errors[name] = exc
            if target.exists():
                target.unlink()
            refreshed.add(name)
            continue
        _atomic_write(target, manifest.serialize())
        refreshed.add(name)
    for name in sorted(set(stored) - set(sources)):
        (manifest_dir / f"{name}{MANIFEST_SUFFIX}").unlink()
        refreshed.add(name)
    if errors:
        raise ManifestRefreshError(errors, refreshed)
    return refreshed


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# Graph


class GraphError(Exception):
    pass


class CycleError(GraphError):
    def __init__(self, cycle: list[str]) -> None:
        super().__init__("import cycle: " + " -> ".join(cycle + cycle[:1]))
        self.cycle = cycle


class DanglingImport(GraphError):
    """Imports naming articles that do not exist. ``missing`` is the first pair."""

    def __init__(self, pairs: list[tuple[str, str]]) -> None:
        self.pairs = sorted(pairs)
        self.importer, self.missing = self.pairs[0]
        listing = ", ".join(f"{a} imports missing {m}" for a, m in self.pairs)
        super().__init__(f"dangling import: {listing}")


@dataclass(frozen=True)
class DependencyGraph:
    nodes: frozenset[str]
    edges: Mapping[str, frozenset[str]]
    reverse_edges: Mapping[str, frozenset[str]] = field(compare=False)

    def imports(self, name: str) -> frozenset[str]:
        return self.edges.get(name, frozenset())

    def importers(self, name: str) -> frozenset[str]:
        return self.reverse_edges.get(name, frozenset())


def _find_cycle(nodes: Iterable[str], edges: Mapping[str, frozenset[str]]) -> list[str] | None:
    """First cycle found by DFS in sorted order, rotated to start at its smallest name."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(nodes, WHITE)
    for root in sorted(color):
        if color[root] != WHITE:
            continue
        path = [root]
        iters = [iter(sorted(edges[root]))]
        color[root] = GREY
        while iters:
            nxt = next(iters[-1], None)
            if nxt is None:
                color[path.pop()] = BLACK
                iters.pop()
            elif color[nxt] == GREY:
                cycle = path[path.index(nxt) :]
                k = cycle.index(min(cycle))
                return cycle[k:] + cycle[:k]
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                iters.append(iter(sorted(edges[nxt])))
    return None


def build_graph(manifests: Iterable[DepManifest]) -> DependencyGraph:
    manifests = list(manifests)
    nodes = frozenset(m.article for m in manifests)
    edges = {m.article: frozenset(m.deps) for m in manifests}
    dangling = [(a, d) for a in sorted(edges) for d in sorted(edges[a]) if d not in nodes]
    if dangling:
        raise DanglingImport(dangling)
    cycle = _find_cycle(nodes, edges)
    if cycle is not None:
        raise CycleError(cycle)
    reverse: dict[str, set[str]] = {n: set() for n in nodes}
    for src, targets in edges.items():
        for t in targets:
            reverse[t].add(src)
    return DependencyGraph(nodes, edges, {k: frozenset(v) for k, v in reverse.items()})


@dataclass(frozen=True)
class DirtySet:
    changed: frozenset[str]
    influenced: frozenset[str]
    deleted: frozenset[str] = frozenset()


def compute_dirty(graph: DependencyGraph, changed: Iterable[str], deleted: Iterable[str] = ()) -> DirtySet:
    """Reverse transitive closure of ``changed`` and ``deleted`` over import edges.

    Deleted articles seed the walk but are not themselves influenced.
    """
    changed = frozenset(changed)
    deleted = frozenset(deleted)
    seen = set(changed)
    queue = deque(changed | deleted)
    while queue:
        name = queue.popleft()
        for importer in graph.reverse_edges.get(name, ()):
            if importer not in seen:
                seen.add(importer)
                queue.append(importer)
    return DirtySet(changed, frozenset(seen - deleted), deleted)


def topo_order(graph: DependencyGraph, subset: Iterable[str]) -> list[frozenset[str]]:
    """Antichain layers of ``subset``; imports always land in earlier layers.

    Ordering through articles outside the subset is preserved: the layer of an
    article is the largest number of subset members on any import path below it.
    """
    subset = frozenset(subset)
    if not subset:
        return []
    # Kahn over the whole graph, visiting imports before importers.
    pending = {n: len(graph.imports(n)) for n in graph.nodes}
    ready = deque(sorted(n for n, k in pending.items() if k == 0))
    below: dict[str, int] = {}
    while ready:
        n = ready.popleft()
        below[n] = max(
            (below[d] + (d in subset) for d in graph.imports(n)),
            default=0,
        )
        for importer in sorted(graph.importers(n)):
            pending[importer] -= 1
            if pending[importer] == 0:
                ready.append(importer)
    layers: dict[int, set[str]] = {}
    for n in subset:
        layers.setdefault(below[n], set()).add(n)
    return [frozenset(layers[k]) for k in sorted(layers)]
