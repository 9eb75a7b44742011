"""Synthetic libraries and random changesets for tests and benchmarks.

A library is described by a model: each article defines one symbol
``v_<name> := k [+ v_<src>]`` where ``src`` is one of its imports, may pin
its own value with a theorem, may cite pinned imports, and may carry extra
theorems. Article text is always rendered from the model, so the expected
values are known without running the verifier.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from pathlib import Path

from fwiki.changes import Action, Change, CommitRequest

ADMISSIBLE = "admissible"
INADMISSIBLE = "inadmissible"
UNKNOWN = "unknown"


@dataclass
class ArticleModel:
    name: str
    imports: list[str] = field(default_factory=list)
    k: int = 1
    src: str | None = None
    pin: bool = True
    by_eval: bool = False
    cites: list[str] = field(default_factory=list)
    # (label, offset or None); offset theorems restate v + offset, None is a constant fact
    extras: list[tuple[str, int | None]] = field(default_factory=list)
    padding: int = 0

    @property
    def symbol(self) -> str:
        return f"v_{self.name}"


@dataclass
class Library:
    articles: dict[str, ArticleModel] = field(default_factory=dict)

    def copy(self) -> Library:
        return Library(copy.deepcopy(self.articles))

    def values(self) -> dict[str, int]:
        out: dict[str, int] = {}
        pending = sorted(self.articles)
        while pending:
            progressed = []
            for name in pending:
                m = self.articles[name]
                if m.src is None:
                    out[name] = m.k
                elif m.src in out:
                    out[name] = m.k + out[m.src]
                else:
                    continue
                progressed.append(name)
            if not progressed:
                raise ValueError(f"model has a symbol cycle among {pending}")
            pending = [n for n in pending if n not in out]
        return out

    def importers(self, name: str) -> list[str]:
        return sorted(n for n, m in self.articles.items() if name in m.imports)

    def render(self, name: str, values: dict[str, int] | None = None) -> str:
        values = self.values() if values is None else values
        m = self.articles[name]
        lines = [f"article {m.name}"]
        lines.append(f"environ imports {', '.join(m.imports)};" if m.imports else "environ")
        lines.append("begin")
        body = str(m.k) if m.src is None else f"{m.k} + v_{m.src}"
        lines.append(f"def d0 : {m.symbol} := {body};")
        if m.pin:
            just = "evaluation" if m.by_eval else "d0"
            lines.append(f"thm t0 : {m.symbol} = {values[name]} by {just};")
        for i, cited in enumerate(m.cites):
            lines.append(f"thm c{i} : v_{cited} = {values[cited]} by {cited}:t0;")
        for label, offset in m.extras:
            if offset is None:
                n = len(label) + 3
                lines.append(f"thm {label} : {n} * 2 = {2 * n} by evaluation;")
            else:
                lines.append(f"thm {label} : {m.symbol} + {offset} = {values[name] + offset} by d0;")
        for i in range(m.padding):
            lines.append(f"-- commentary line {i} padding the article body to a realistic size")
        return "\n".join(lines) + "\n"

    def texts(self) -> dict[str, bytes]:
        values = self.values()
        return {f"{n}.fml": self.render(n, values).encode("utf-8") for n in sorted(self.articles)}

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for path, data in self.texts().items():
            (directory / path).write_bytes(data)
        return directory


# --------------------------------------------------------------------------
# Corpus shapes


def chain(n: int, pin_dependents: bool = True, prefix: str = "a") -> Library:
    """``a000 <- a001 <- ...``: each article imports and builds on the previous one."""
    lib = Library()
    prev = None
    for i in range(n):
        name = f"{prefix}{i:03d}"
        lib.articles[name] = ArticleModel(
            name, [prev] if prev else [], k=1 + i % 7, src=prev, pin=pin_dependents or prev is None
        )
        prev = name
    return lib


def diamond() -> Library:
    """d imports b and c; b and c import a."""
    lib = Library()
    lib.articles["a"] = ArticleModel("a", [], k=2)
    lib.articles["b"] = ArticleModel("b", ["a"], k=3, src="a", cites=["a"])
    lib.articles["c"] = ArticleModel("c", ["a"], k=5, src="a")
    lib.articles["d"] = ArticleModel("d", ["b", "c"], k=7, src="c", cites=["b"])
    return lib


def layered(n: int, width: int, seed: int = 0, padding: int = 0, theorems: int = 0) -> Library:
    """``n`` articles in layers of ``width``; each imports 1-3 from the layer below.

    ``theorems`` extra value-dependent theorems per article add verification work.
    """
    rng = random.Random(seed)
    lib = Library()
    below: list[str] = []
    for start in range(0, n, width):
        layer = []
        for i in range(start, min(n, start + width)):
            name = f"w{i:03d}"
            imports = sorted(rng.sample(below, min(len(below), rng.randint(1, 3)))) if below else []
            pinned = [x for x in imports if lib.articles[x].pin]
            lib.articles[name] = ArticleModel(
                name,
                imports,
                k=rng.randint(1, 9),
                src=rng.choice(imports) if imports else None,
                pin=True,
                cites=pinned[:1],
                extras=([("e0", None)] if i % 3 == 0 else []) + [(f"p{j}", j) for j in range(theorems)],
                padding=padding,
            )
            layer.append(name)
        below = layer
    return lib


def random_library(rng: random.Random, n: int, max_imports: int = 3) -> Library:
    lib = Library()
    names = []
    for i in range(n):
        name = f"r{i:03d}"
        imports = sorted(rng.sample(names, rng.randint(0, min(max_imports, len(names)))))
        pinned = [x for x in imports if lib.articles[x].pin]
        lib.articles[name] = ArticleModel(
            name,
            imports,
            k=rng.randint(1, 9),
            src=rng.choice(imports) if imports and rng.random() < 0.8 else None,
            pin=rng.random() < 0.7,
            by_eval=rng.random() < 0.3,
            cites=rng.sample(pinned, min(len(pinned), rng.randint(0, 1))),
            extras=[("e0", None)] if rng.random() < 0.3 else [],
        )
        names.append(name)
    return lib


# --------------------------------------------------------------------------
# Changesets


@dataclass
class Proposal:
    kind: str
    request: CommitRequest
    expect: str
    library: Library | None  # model after acceptance; None if it must be rejected


def _diff_request(kind: str, old: Library, new: Library, only: set[str] | None = None) -> CommitRequest:
    old_t, new_t = old.texts(), new.texts()
    changes = []
    for path in sorted(set(old_t) | set(new_t)):
        if only is not None and path[:-4] not in only:
            continue
        if path not in new_t:
            changes.append(Change(path, Action.DELETE))
        elif path not in old_t:
            changes.append(Change(path, Action.ADD, new_t[path]))
        elif old_t[path] != new_t[path]:
            changes.append(Change(path, Action.MODIFY, new_t[path]))
    return CommitRequest("synth", kind, tuple(changes))


def _touched_only(old: Library, new: Library, touched: set[str]) -> bool:
    """True if every article outside ``touched`` renders identically under ``new``."""
    old_t, new_t = old.texts(), new.texts()
    return all(old_t[p] == new_t[p] for p in old_t if p in new_t and p[:-4] not in touched)


class ChangeGenerator:
    ADMISSIBLE_KINDS = ("justify", "append", "add_article", "multi", "refactor")
    UNKNOWN_KINDS = ("redefine", "delete")
    BAD_KINDS = ("false_theorem", "dangling_import", "cycle", "illegal_path", "parse_error", "unbound_symbol")

    def __init__(self, rng: random.Random, library: Library) -> None:
        self.rng = rng
        self.library = library
        self._fresh = 0

    def accept(self, proposal: Proposal) -> None:
        if proposal.library is None:
            raise AssertionError(f"{proposal.kind} proposal was expected to be rejected")
        self.library = proposal.library

    def _fresh_name(self) -> str:
        while True:
            self._fresh += 1
            name = f"n{self._fresh:03d}"
            if name not in self.library.articles:
                return name

    def propose(self, kind: str | None = None) -> Proposal:
        if kind is None:
            pool = list(self.ADMISSIBLE_KINDS * 2 + self.UNKNOWN_KINDS + self.BAD_KINDS)
            kind = self.rng.choice(pool)
        if not self.library.articles and kind not in ("add_article", "illegal_path"):
            kind = "add_article"
        return getattr(self, f"_{kind}")()

    def propose_bad(self) -> Proposal:
        return self.propose(self.rng.choice(self.BAD_KINDS))

    def _pick(self) -> str:
        return self.rng.choice(sorted(self.library.articles))

    def _edit(self, kind: str, mutate, expect: str = ADMISSIBLE) -> Proposal:
        new = self.library.copy()
        touched = mutate(new)
        # Only the mutated articles are sent; others keep their current text.
        request = _diff_request(kind, self.library, new, touched)
        if expect == UNKNOWN:
            expect = ADMISSIBLE if _touched_only(self.library, new, touched) else INADMISSIBLE
        return Proposal(kind, request, expect, new if expect == ADMISSIBLE else None)

    def _justify(self) -> Proposal:
        pinned = [n for n, m in self.library.articles.items() if m.pin]
        if not pinned:
            return self._append()
        name = self.rng.choice(sorted(pinned))

        def mutate(lib: Library) -> set[str]:
            lib.articles[name].by_eval = not lib.articles[name].by_eval
            return {name}

        return self._edit("justify", mutate)

    def _append(self) -> Proposal:
        name = self._pick()

        def mutate(lib: Library) -> set[str]:
            m = lib.articles[name]
            label = f"x{len(m.extras)}"
            m.extras.append((label, self.rng.choice([None, self.rng.randint(1, 50)])))
            return {name}

        return self._edit("append", mutate)

    def _add_article(self) -> Proposal:
        name = self._fresh_name()
        existing = sorted(self.library.articles)

        def mutate(lib: Library) -> set[str]:
            imports = sorted(self.rng.sample(existing, self.rng.randint(0, min(3, len(existing)))))
            pinned = [x for x in imports if lib.articles[x].pin]
            lib.articles[name] = ArticleModel(
                name,
                imports,
                k=self.rng.randint(1, 9),
                src=self.rng.choice(imports) if imports else None,
                pin=self.rng.random() < 0.8,
                cites=pinned[:1],
            )
            return {name}

        return self._edit("add_article", mutate)

    def _multi(self) -> Proposal:
        names = sorted(self.library.articles)
        picks = self.rng.sample(names, min(2, len(names)))

        def mutate(lib: Library) -> set[str]:
            for i, name in enumerate(picks):
                m = lib.articles[name]
                if i == 0 and m.pin:
                    m.by_eval = not m.by_eval
                else:
                    m.extras.append((f"x{len(m.extras)}", None))
            return set(picks)

        return self._edit("multi", mutate)

    def _redefine(self) -> Proposal:
        name = self._pick()

        def mutate(lib: Library) -> set[str]:
            m = lib.articles[name]
            m.k = m.k % 9 + 1 + self.rng.randint(0, 5)
            return {name}

        return self._edit("redefine", mutate, UNKNOWN)

    def _refactor(self) -> Proposal:
        """Redefine a symbol and restate every theorem it affects, in one request."""
        name = self._pick()
        new = self.library.copy()
        new.articles[name].k += self.rng.randint(1, 5)
        return Proposal("refactor", _diff_request("refactor", self.library, new), ADMISSIBLE, new)

    def _delete(self) -> Proposal:
        name = self._pick()
        if self.library.importers(name):
            request = CommitRequest("synth", "delete", (Change(f"{name}.fml", Action.DELETE),))
            return Proposal("delete", request, INADMISSIBLE, None)
        new = self.library.copy()
        del new.articles[name]
        return Proposal("delete", _diff_request("delete", self.library, new), ADMISSIBLE, new)

    # -- always inadmissible --------------------------------------------

    def _modified(self, kind: str, name: str, text: str) -> Proposal:
        change = Change(f"{name}.fml", Action.MODIFY, text.encode("utf-8"))
        return Proposal(kind, CommitRequest("synth", kind, (change,)), INADMISSIBLE, None)

    def _false_theorem(self) -> Proposal:
        name = self._pick()
        value = self.library.values()[name]
        text = self.library.render(name) + f"thm bad : v_{name} = {value + 1} by evaluation;\n"
        return self._modified("false_theorem", name, text)

    def _dangling_import(self) -> Proposal:
        name = self._pick()
        m = self.library.articles[name]
        text = self.library.render(name)
        old = f"environ imports {', '.join(m.imports)};" if m.imports else "environ"
        new = f"environ imports {', '.join(m.imports + ['ghost_' + name])};"
        return self._modified("dangling_import", name, text.replace(old, new, 1))

    def _cycle(self) -> Proposal:
        # Make some article import one of its transitive importers (or itself).
        name = self._pick()
        seen, stack = set(), [name]
        while stack:
            cur = stack.pop()
            for imp in self.library.importers(cur):
                if imp not in seen:
                    seen.add(imp)
                    stack.append(imp)
        target = self.rng.choice(sorted(seen)) if seen else name
        m = self.library.articles[name]
        text = self.library.render(name)
        old = f"environ imports {', '.join(m.imports)};" if m.imports else "environ"
        new = f"environ imports {', '.join(m.imports + [target])};"
        return self._modified("cycle", name, text.replace(old, new, 1))

    def _illegal_path(self) -> Proposal:
        path = self.rng.choice(["../evil.fml", "state/build.json", "html/index.html", "deps/x.d", "Upper.fml"])
        change = Change(path, Action.ADD, b"article evil\nenviron\nbegin\n")
        return Proposal("illegal_path", CommitRequest("synth", "illegal", (change,)), INADMISSIBLE, None)

    def _parse_error(self) -> Proposal:
        name = self._pick()
        return self._modified("parse_error", name, self.library.render(name) + "thm : = by;\n")

    def _unbound_symbol(self) -> Proposal:
        name = self._pick()
        text = self.library.render(name) + "def zz : nowhere_sym := undefined_sym + 1;\n"
        return self._modified("unbound_symbol", name, text)
