from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwiki import synth
from fwiki.depgraph import (
    CycleError,
    DanglingImport,
    DepManifest,
    ManifestRefreshError,
    build_graph,
    compute_dirty,
    extract_deps,
    load_manifests,
    refresh_manifests,
    sha256_bytes,
    topo_order,
)
from fwiki.lang import ParseError, parse_article


def _m(name: str, *deps: str) -> DepManifest:
    return DepManifest(name, tuple(sorted(deps)), "0" * 64)


def _write(path: Path, text: str) -> Path:
    path.write_text(text, "utf-8")
    return path


def diamond_graph():
    return build_graph([_m("a"), _m("b", "a"), _m("c", "a"), _m("d", "b", "c")])


# --------------------------------------------------------------------------
# Manifests


def test_extract_deps_sorts(tmp_path):
    p = _write(tmp_path / "x.fml", "article x\nenviron imports b, a;\nbegin\n")
    manifest = extract_deps(p)
    assert manifest.deps == ("a", "b")
    assert manifest.source_hash == sha256_bytes(p.read_bytes())


def test_extract_deps_empty_environ(tmp_path):
    p = _write(tmp_path / "x.fml", "article x\nenviron\nbegin\n")
    assert extract_deps(p).deps == ()


def test_extract_deps_errors(tmp_path):
    with pytest.raises(OSError):
        extract_deps(tmp_path / "missing.fml")
    p = _write(tmp_path / "x.fml", "article x\nenviron imports ;\nbegin\n")
    with pytest.raises(ParseError):
        extract_deps(p)


def test_manifest_format_is_exact():
    m = DepManifest("g", ("a", "b"), "ab" * 32)
    assert m.serialize() == b"article g\nhash " + b"ab" * 32 + b"\ndep a\ndep b\n"
    assert DepManifest.parse(m.serialize()) == m
    for bad in (b"article g\nhash x\n", b"article g\nhash " + b"0" * 64 + b"\ndep b\ndep a\n", b"article g"):
        with pytest.raises(ValueError):
            DepManifest.parse(bad)


def test_manifests_of_generated_corpus_match_full_parse(tmp_path):
    lib = synth.layered(200, 10, seed=3)
    lib_dir = lib.write(tmp_path / "lib")
    checked = 0
    for path in sorted(lib_dir.glob("*.fml")):
        name = path.stem
        expected = tuple(sorted(set(parse_article(path.read_text("utf-8"), name).environ.imports)))
        assert extract_deps(path).deps == expected
        checked += 1
    assert checked == 200


def test_refresh_cycle(tmp_path):
    lib = synth.diamond().write(tmp_path / "lib")
    deps = tmp_path / "deps"
    assert refresh_manifests(lib, deps) == {"a", "b", "c", "d"}
    assert refresh_manifests(lib, deps) == set()

    before = {p.name: (p.read_bytes(), p.stat().st_mtime_ns) for p in deps.iterdir()}
    with open(lib / "d.fml", "a", encoding="utf-8") as fh:
        fh.write("thm extra : 1 = 1 by evaluation;\n")
    assert refresh_manifests(lib, deps) == {"d"}
    after = {p.name: (p.read_bytes(), p.stat().st_mtime_ns) for p in deps.iterdir()}
    for name in ("a.d", "b.d", "c.d"):
        assert after[name] == before[name]
    assert after["d.d"][0] != before["d.d"][0]

    (lib / "d.fml").unlink()
    assert refresh_manifests(lib, deps) == {"d"}
    assert not (deps / "d.d").exists()


def test_refresh_deletion_then_dangling(tmp_path):
    lib = synth.diamond().write(tmp_path / "lib")
    deps = tmp_path / "deps"
    refresh_manifests(lib, deps)
    (lib / "a.fml").unlink()
    assert refresh_manifests(lib, deps) == {"a"}
    with pytest.raises(DanglingImport) as exc:
        build_graph(load_manifests(deps).values())
    assert (exc.value.importer, exc.value.missing) == ("b", "a")


def test_refresh_continues_past_errors(tmp_path):
    lib = synth.diamond().write(tmp_path / "lib")
    deps = tmp_path / "deps"
    _write(lib / "b.fml", "article b\nenviron imports ;\nbegin\n")
    _write(lib / "c.fml", "article wrong\nenviron\nbegin\n")
    with pytest.raises(ManifestRefreshError) as exc:
        refresh_manifests(lib, deps)
    assert set(exc.value.errors) == {"b", "c"}
    assert {p.name for p in deps.iterdir()} == {"a.d", "d.d"}


# --------------------------------------------------------------------------
# Graph examples


def test_chain_graph():
    g = build_graph([_m("a", "b"), _m("b", "c"), _m("c")])
    assert g.nodes == {"a", "b", "c"}
    assert sum(len(v) for v in g.edges.values()) == 2
    assert g.importers("c") == {"b"} and g.importers("b") == {"a"} and g.importers("a") == frozenset()


def test_two_cycle():
    with pytest.raises(CycleError) as exc:
        build_graph([_m("a", "b"), _m("b", "a")])
    assert exc.value.cycle == ["a", "b"]


def test_dangling_import():
    with pytest.raises(DanglingImport) as exc:
        build_graph([_m("a", "ghost")])
    assert (exc.value.importer, exc.value.missing) == ("a", "ghost")


def test_dirty_examples():
    g = diamond_graph()
    assert compute_dirty(g, {"a"}).influenced == {"a", "b", "c", "d"}
    assert compute_dirty(g, {"d"}).influenced == {"d"}
    assert compute_dirty(g, set()).influenced == frozenset()


def test_dirty_deleted_seeds_but_is_not_influenced():
    g = diamond_graph()
    dirty = compute_dirty(g, set(), {"b"})
    assert dirty.influenced == {"d"}
    assert dirty.deleted == {"b"}


def test_topo_examples():
    g = diamond_graph()
    assert topo_order(g, {"a", "b", "c", "d"}) == [{"a"}, {"b", "c"}, {"d"}]
    assert topo_order(g, {"d"}) == [{"d"}]
    chain = build_graph([_m("a"), _m("b", "a"), _m("c", "b")])
    assert topo_order(chain, {"a", "c"}) == [{"a"}, {"c"}]


# --------------------------------------------------------------------------
# Properties over random DAGs


@st.composite
def dags(draw, max_nodes=12):
    n = draw(st.integers(1, max_nodes))
    names = [f"n{i}" for i in range(n)]
    manifests = []
    for i, name in enumerate(names):
        deps = draw(st.lists(st.sampled_from(names[:i]), unique=True, max_size=3)) if i else []
        manifests.append(_m(name, *deps))
    return build_graph(manifests)


def _reaches(graph, start: str, target: str) -> bool:
    stack, seen = [start], set()
    while stack:
        n = stack.pop()
        if n == target:
            return True
        if n not in seen:
            seen.add(n)
            stack.extend(graph.imports(n))
    return False


def _oracle_influenced(graph, changed):
    return {n for n in graph.nodes if any(_reaches(graph, n, c) for c in changed)} | set(changed)


@given(dags(), st.data())
@settings(max_examples=200, deadline=None)
def test_dirty_matches_brute_force(graph, data):
    changed = data.draw(st.sets(st.sampled_from(sorted(graph.nodes))))
    dirty = compute_dirty(graph, changed)
    assert dirty.influenced == _oracle_influenced(graph, changed)
    assert dirty.changed <= dirty.influenced


@given(dags(), st.data())
@settings(max_examples=200, deadline=None)
def test_dirty_fixpoint_and_monotone(graph, data):
    nodes = sorted(graph.nodes)
    s1 = data.draw(st.sets(st.sampled_from(nodes)))
    s2 = s1 | data.draw(st.sets(st.sampled_from(nodes)))
    inf1 = compute_dirty(graph, s1).influenced
    assert compute_dirty(graph, inf1).influenced == inf1
    assert inf1 <= compute_dirty(graph, s2).influenced


@given(dags(), st.data())
@settings(max_examples=200, deadline=None)
def test_append_safety(graph, data):
    imports = data.draw(st.sets(st.sampled_from(sorted(graph.nodes)), max_size=4))
    manifests = [_m(n, *graph.imports(n)) for n in graph.nodes] + [_m("zznew", *imports)]
    grown = build_graph(manifests)
    assert compute_dirty(grown, {"zznew"}).influenced == {"zznew"}


@given(dags(), st.data())
@settings(max_examples=200, deadline=None)
def test_topo_layers_respect_edges(graph, data):
    subset = data.draw(st.sets(st.sampled_from(sorted(graph.nodes))))
    layers = topo_order(graph, subset)
    layer_of = {n: i for i, layer in enumerate(layers) for n in layer}
    assert set(layer_of) == subset
    assert sum(len(layer) for layer in layers) == len(subset)
    for u in subset:
        for v in subset:
            if u != v and _reaches(graph, u, v):
                assert layer_of[v] < layer_of[u]


@given(st.integers(1, 15), st.integers(0, 2**16))
@settings(max_examples=30, deadline=None)
def test_refresh_idempotent_on_random_libraries(tmp_path_factory, n, seed):
    import random

    lib = synth.random_library(random.Random(seed), n)
    root = tmp_path_factory.mktemp("lib")
    lib_dir = lib.write(root / "lib")
    refresh_manifests(lib_dir, root / "deps")
    assert refresh_manifests(lib_dir, root / "deps") == set()
