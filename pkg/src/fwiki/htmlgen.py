"""Static, cross-linked HTML for a verified library.

Pages are ``<article>.html`` plus ``index.html``; every item is a section
with id ``item-<label>``. Identifiers link to the definition they resolve
to (same resolution order as the verifier) and references link to the
cited item. Output is byte-deterministic.
"""

from __future__ import annotations

import hashlib
import html
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from fwiki.depgraph import SOURCE_SUFFIX, DirtySet
from fwiki.lang import Article, BinOp, Definition, Expr, Ident, IntLit, parse_article
from fwiki.sandbox import LINK_CACHE_FILE
from fwiki.verifier import BuildState

INDEX_PAGE = "index.html"

_STYLE = """\
body { font-family: sans-serif; max-width: 52em; margin: 2em auto; color: #222; }
section { border-left: 3px solid #ccd; padding: 0.2em 0.8em; margin: 0.8em 0; }
code { font-size: 1.05em; }
a.sym { color: #1a4f9c; text-decoration: none; }
a.ref { color: #7a2c8f; }
.kw { font-weight: bold; }
"""


class MissingIndexEntry(Exception):
    """A symbol or reference has no target in the link index."""


class BrokenLink(Exception):
    def __init__(self, broken: list[tuple[str, str]]) -> None:
        self.broken = sorted(broken)
        listing = ", ".join(f"{page} -> {href}" for page, href in self.broken[:10])
        super().__init__(f"{len(self.broken)} broken link(s): {listing}")


def anchor(label: str) -> str:
    return f"item-{label}"


def page_name(article: str) -> str:
    return f"{article}.html"


@dataclass(frozen=True)
class LinkIndex:
    """Link targets from Verified records.

    ``definitions`` maps ``(article, symbol)`` to ``(article, label, anchor)``;
    symbols are keyed per article because the same symbol may be defined in
    several articles and resolution depends on the importer's environ.
    """

    definitions: Mapping[tuple[str, str], tuple[str, str, str]] = field(default_factory=dict)
    theorems: Mapping[tuple[str, str], str] = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: BuildState) -> LinkIndex:
        definitions = {}
        items = {}
        for name, rec in state.records.items():
            if not rec.verified or rec.export is None:
                continue
            for label, kind, payload in rec.export.entries:
                items[(name, label)] = anchor(label)
                if kind == "def":
                    definitions[(name, payload[0])] = (name, label, anchor(label))
        return cls(definitions, items)


@dataclass(frozen=True)
class RenderedPage:
    article: str
    html: bytes
    anchors: frozenset[str]
    outlinks: frozenset[tuple[str, str]]


def _page(title: str, body: list[str]) -> bytes:
    head = [
        "<!DOCTYPE html>",
        '<html lang="en">',
        "<head>",
        '<meta charset="utf-8">',
        f"<title>{html.escape(title)}</title>",
        "<style>",
        _STYLE.rstrip("\n"),
        "</style>",
        "</head>",
        "<body>",
    ]
    return ("\n".join(head + body + ["</body>", "</html>"]) + "\n").encode("utf-8")


def render_article(article: Article, index: LinkIndex) -> RenderedPage:
    name = article.name
    imports = article.environ.imports
    local: dict[str, str] = {}
    outlinks: set[tuple[str, str]] = set()
    anchors: set[str] = set()

    def sym_link(ident: Ident) -> str:
        text = html.escape(ident.name)
        if ident.name in local:
            return f'<a class="sym" href="#{anchor(local[ident.name])}">{text}</a>'
        for imp in imports:
            target = index.definitions.get((imp, ident.name))
            if target is not None:
                outlinks.add((page_name(imp), target[2]))
                return f'<a class="sym" href="{page_name(imp)}#{target[2]}">{text}</a>'
        raise MissingIndexEntry(f"{name}: no definition for symbol {ident.name!r}")

    def expr_html(expr: Expr) -> str:
        # Iterative post-order; mirrors lang.format_expr.
        parts: list[str] = []
        stack: list[tuple[Expr, bool]] = [(expr, False)]
        while stack:
            node, done = stack.pop()
            if isinstance(node, IntLit):
                parts.append(str(node.value))
            elif isinstance(node, Ident):
                parts.append(sym_link(node))
            elif not done:
                stack.append((node, True))
                if isinstance(node, BinOp):
                    stack.append((node.right, False))
                    stack.append((node.left, False))
                else:
                    stack.append((node.inner, False))
            elif isinstance(node, BinOp):
                right = parts.pop()
                left = parts.pop()
                parts.append(f"{left} {html.escape(node.op)} {right}")
            else:
                parts.append(f"({parts.pop()})")
        return parts[0]

    body = [f"<h1>Article <code>{html.escape(name)}</code></h1>", '<p><a href="index.html">Library index</a></p>']
    if imports:
        links = ", ".join(f'<a href="{page_name(i)}">{html.escape(i)}</a>' for i in imports)
        body.append(f"<p>Imports: {links}</p>")
        outlinks.update((page_name(i), "") for i in imports)
    else:
        body.append("<p>Imports: none</p>")
    for item in article.items:
        aid = anchor(item.label)
        anchors.add(aid)
        if isinstance(item, Definition):
            text = (
                f'<span class="kw">def</span> {html.escape(item.label)} : '
                f"<dfn>{html.escape(item.symbol)}</dfn> := {expr_html(item.body)};"
            )
            local[item.symbol] = item.label
        else:
            statement = f"{expr_html(item.lhs)} {html.escape(item.relation)} {expr_html(item.rhs)}"
            if item.refs:
                refs = []
                for ref in item.refs:
                    if ref.article is None:
                        refs.append(f'<a class="ref" href="#{anchor(ref.label)}">{html.escape(ref.label)}</a>')
                        continue
                    if (ref.article, ref.label) not in index.theorems:
                        raise MissingIndexEntry(f"{name}: no item {ref.article}:{ref.label}")
                    target = (page_name(ref.article), anchor(ref.label))
                    outlinks.add(target)
                    label = html.escape(f"{ref.article}:{ref.label}")
                    refs.append(f'<a class="ref" href="{target[0]}#{target[1]}">{label}</a>')
                justification = ", ".join(refs)
            else:
                justification = "evaluation"
            text = (
                f'<span class="kw">thm</span> {html.escape(item.label)} : {statement} '
                f'<span class="kw">by</span> {justification};'
            )
        body.append(f'<section id="{aid}"><code>{text}</code></section>')
    page = _page(f"{name} - formal library", body)
    return RenderedPage(name, page, frozenset(anchors), frozenset(outlinks))


def render_index(library: BuildState) -> RenderedPage:
    body = ["<h1>Library index</h1>"]
    names = sorted(library.records)
    if names:
        body.append("<ul>")
        outlinks = set()
        for name in names:
            rec = library.records[name]
            count = 0 if rec.export is None else len(rec.export.entries)
            noun = "item" if count == 1 else "items"
            body.append(f'<li><a href="{page_name(name)}">{html.escape(name)}</a> ({count} {noun})</li>')
            outlinks.add((page_name(name), ""))
        body.append("</ul>")
    else:
        body.append("<p>The library is empty.</p>")
        outlinks = set()
    return RenderedPage("index", _page("Library index", body), frozenset(), frozenset(outlinks))


# --------------------------------------------------------------------------
# Rendering into a sandbox and publishing


def render_into(root: Path, names: Iterable[str], state: BuildState, deleted: Iterable[str] = ()) -> set[str]:
    """Write pages for ``names`` plus the index into ``root/html``.

    Returns the set of page filenames written (unchanged bytes are not rewritten).
    """
    out_dir = root / "html"
    out_dir.mkdir(parents=True, exist_ok=True)
    index = LinkIndex.from_state(state)
    written = set()
    for name in sorted(names):
        text = (root / f"{name}{SOURCE_SUFFIX}").read_text("utf-8")
        page = render_article(parse_article(text, name), index)
        if _write_if_changed(out_dir / page_name(name), page.html):
            written.add(page_name(name))
    for name in deleted:
        path = out_dir / page_name(name)
        if path.exists():
            path.unlink()
    if _write_if_changed(out_dir / INDEX_PAGE, render_index(state).html):
        written.add(INDEX_PAGE)
    return written


def _write_if_changed(path: Path, data: bytes) -> bool:
    try:
        if path.stat().st_size == len(data) and path.read_bytes() == data:
            return False
    except FileNotFoundError:
        pass
    tmp = path.with_name(f".{path.name}.part")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return True


_ID_RE = re.compile(r'<[a-zA-Z][^>]*?\sid="([^"]*)"')
_HREF_RE = re.compile(r'<a\s[^>]*?href="([^"]*)"', re.IGNORECASE)


@dataclass(frozen=True)
class _Links:
    ids: frozenset[str]
    hrefs: frozenset[str]


def _scan(data: bytes) -> _Links:
    """Anchors and distinct hrefs of one page (double-quoted attributes, as we emit them)."""
    text = data.decode("utf-8")
    return _Links(
        frozenset(html.unescape(v) for v in _ID_RE.findall(text)),
        frozenset(html.unescape(v) for v in _HREF_RE.findall(text)),
    )


def _broken(scanned: Mapping[str, _Links]) -> list[tuple[str, str]]:
    broken = []
    for name in sorted(scanned):
        for href in sorted(scanned[name].hrefs):
            if "://" in href or href.startswith("mailto:"):
                continue
            target, _, frag = href.partition("#")
            target = target or name
            if target not in scanned or (frag and frag not in scanned[target].ids):
                broken.append((name, href))
    return broken


def check_links(pages: Mapping[str, bytes]) -> list[tuple[str, str]]:
    """Broken intra-site links as ``(page, href)`` pairs; empty means total."""
    return _broken({name: _scan(data) for name, data in pages.items()})


class _LinkCache:
    """Scan results of published pages keyed by their stat; private to a sandbox."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self.entries: dict[str, tuple[tuple[int, ...], _Links]] = {}
        try:
            raw = json.loads(path.read_text("utf-8"))
        except (OSError, ValueError):
            raw = {}
        for page, (key, ids, hrefs) in raw.items():
            self.entries[page] = (tuple(key), _Links(frozenset(ids), frozenset(hrefs)))

    @staticmethod
    def key(st: os.stat_result) -> tuple[int, ...]:
        return (st.st_size, st.st_mtime_ns, st.st_ctime_ns, st.st_ino)

    def links(self, path: Path) -> _Links:
        key = self.key(path.stat())
        cached = self.entries.get(path.name)
        if cached is not None and cached[0] == key:
            return cached[1]
        links = _scan(path.read_bytes())
        self.entries[path.name] = (key, links)
        return links

    def record(self, path: Path, links: _Links) -> None:
        self.entries[path.name] = (self.key(path.stat()), links)

    def save(self, present: set[str]) -> None:
        data = {
            page: [list(key), sorted(links.ids), sorted(links.hrefs)]
            for page, (key, links) in sorted(self.entries.items())
            if page in present
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(f".{self.path.name}.tmp")
        tmp.write_text(json.dumps(data, separators=(",", ":")), "utf-8")
        os.replace(tmp, self.path)


def crawl(publish_dir: str | os.PathLike[str]) -> list[tuple[str, str]]:
    publish_dir = Path(publish_dir)
    pages = {p.name: p.read_bytes() for p in publish_dir.glob("*.html")}
    return check_links(pages)


def publish(dirty: DirtySet, sandbox, publish_dir: str | os.PathLike[str], full: bool = False) -> set[str]:
    """Copy changed pages from ``sandbox/html`` into ``publish_dir``.

    Only pages of influenced articles and the index are considered (all pages
    with ``full``); unchanged bytes are not rewritten and pages of deleted
    articles are removed. The link check runs on the would-be result first, so
    a BrokenLink leaves ``publish_dir`` untouched.
    """
    publish_dir = Path(publish_dir)
    publish_dir.mkdir(parents=True, exist_ok=True)
    src = Path(sandbox.root) / "html"
    if full:
        wanted = {p.name for p in src.glob("*.html")}
        removed = {p.name for p in publish_dir.glob("*.html")} - wanted
    else:
        wanted = {page_name(n) for n in dirty.influenced} | {INDEX_PAGE}
        removed = {page_name(n) for n in dirty.deleted}
    updates: dict[str, bytes] = {}
    for page in sorted(wanted):
        data = (src / page).read_bytes()
        dest = publish_dir / page
        if not dest.exists() or dest.stat().st_size != len(data) or _digest(dest.read_bytes()) != _digest(data):
            updates[page] = data
    cache = _LinkCache(Path(sandbox.root) / LINK_CACHE_FILE)
    scanned = {name: _scan(data) for name, data in updates.items()}
    for path in publish_dir.glob("*.html"):
        if path.name not in removed and path.name not in scanned:
            scanned[path.name] = cache.links(path)
    broken = _broken(scanned)
    if broken:
        raise BrokenLink(broken)
    written = set()
    for page, data in sorted(updates.items()):
        _write_if_changed(publish_dir / page, data)
        cache.record(publish_dir / page, scanned[page])
        written.add(page)
    for page in sorted(removed):
        path = publish_dir / page
        if path.exists():
            path.unlink()
            written.add(page)
    cache.save(set(scanned))
    return written


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
