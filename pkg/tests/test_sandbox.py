from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwiki import synth
from fwiki.changes import Action, Change, CommitRequest, IllegalPath
from fwiki.sandbox import (
    INDEX_FILE,
    PROMOTE_DIR,
    UNALIGNED_FILE,
    PromoteIncoherent,
    Sandbox,
    diff_trees,
    io_stats,
    is_valid,
    overlay,
    promote,
    recover,
    sync,
    tree_hash,
)
from fwiki.verifier import verify_library


def write_tree(root: Path, files: dict[str, bytes]) -> Sandbox:
    for rel, data in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    root.mkdir(parents=True, exist_ok=True)
    return Sandbox(root)


def contents(sb: Sandbox) -> dict[str, bytes]:
    return {rel: (sb.root / rel).read_bytes() for rel in sb.walk()}


def coherent_sandbox(root: Path, library: synth.Library) -> Sandbox:
    sb = Sandbox(library.write(root))
    state, _ = verify_library({k[:-4]: v for k, v in library.texts().items()})
    state.save(sb.root)
    (sb.root / "html").mkdir(exist_ok=True)
    (sb.root / "html" / "index.html").write_text("<html></html>\n")
    return sb


# --------------------------------------------------------------------------
# diff and sync


def test_identical_trees_empty_plan(tmp_path):
    files = {"a.fml": b"x", "html/a.html": b"<p>", "deps/a.d": b"article a\n"}
    a = write_tree(tmp_path / "a", files)
    b = write_tree(tmp_path / "b", files)
    assert not diff_trees(a, b)


def test_one_flipped_byte(tmp_path):
    files = {"a.fml": b"x", "html/a.html": b"<p>hello</p>"}
    a = write_tree(tmp_path / "a", files)
    b = write_tree(tmp_path / "b", {**files, "html/a.html": b"<p>hellp</p>"})
    plan = diff_trees(a, b)
    assert plan.copy == {"html/a.html"} and plan.delete == frozenset()


def test_size_difference_never_reads_bodies(tmp_path):
    a = write_tree(tmp_path / "a", {"big.fml": b"x" * 10_000})
    b = write_tree(tmp_path / "b", {"big.fml": b"x" * 9_999})
    io_stats.reset()
    assert diff_trees(a, b).copy == {"big.fml"}
    assert io_stats.bytes_hashed == 0


def test_leftover_file_is_deleted(tmp_path):
    a = write_tree(tmp_path / "a", {"a.fml": b"x"})
    b = write_tree(tmp_path / "b", {"a.fml": b"x", "html/stale.html": b"old"})
    assert diff_trees(a, b).delete == {"html/stale.html"}
    sync(a, b)
    assert not (b.root / "html").exists()


def test_sync_into_empty(tmp_path):
    files = {"a.fml": b"1", "b.fml": b"2", "html/x.html": b"3", "deps/a.d": b"4"}
    a = write_tree(tmp_path / "a", files)
    plan = sync(a, Sandbox(tmp_path / "b"))
    assert plan.copy == set(files)
    assert not diff_trees(a, Sandbox(tmp_path / "b"))


def test_private_files_are_not_synced(tmp_path):
    a = write_tree(tmp_path / "a", {"a.fml": b"1"})
    tree_hash(a)  # writes a.root/state/tree.idx
    assert (a.root / INDEX_FILE).exists()
    b = Sandbox(tmp_path / "b")
    assert sync(a, b).copy == {"a.fml"}


def test_sync_error_marks_unaligned(tmp_path, monkeypatch):
    a = write_tree(tmp_path / "a", {"a.fml": b"1", "b.fml": b"2"})
    b = Sandbox(tmp_path / "b")
    real = os.replace
    calls = []

    def failing(src, dst):
        calls.append(dst)
        if len(calls) == 2:
            raise OSError("disk full")
        return real(src, dst)

    monkeypatch.setattr(os, "replace", failing)
    with pytest.raises(OSError):
        sync(a, b)
    monkeypatch.setattr(os, "replace", real)
    assert (b.root / UNALIGNED_FILE).exists()
    sync(a, b)
    assert not (b.root / UNALIGNED_FILE).exists()
    assert contents(a) == contents(b)


def test_hash_cache_detects_same_size_rewrite(tmp_path):
    a = write_tree(tmp_path / "a", {"a.fml": b"one"})
    b = write_tree(tmp_path / "b", {"a.fml": b"one"})
    assert not diff_trees(a, b)
    (b.root / "a.fml").write_bytes(b"two")
    assert diff_trees(a, b).copy == {"a.fml"}


tree_paths = st.sampled_from(["a.fml", "b.fml", "deps/a.d", "html/a.html", "html/sub/x.html", "state/build.json"])
trees = st.dictionaries(tree_paths, st.binary(max_size=16), max_size=6)


@given(trees, trees)
@settings(max_examples=60, deadline=None)
def test_sync_properties(tmp_path_factory, src_files, dst_files):
    root = tmp_path_factory.mktemp("sync")
    a = write_tree(root / "a", src_files)
    b = write_tree(root / "b", dst_files)
    expected = diff_trees(a, b)
    assert (not expected) == (contents(a) == contents(b))
    io_stats.reset()
    plan = sync(a, b)
    assert plan == expected
    assert io_stats.files_written == len(plan.copy)
    assert io_stats.files_deleted == len(plan.delete)
    assert contents(a) == contents(b)
    assert not sync(a, b)


# --------------------------------------------------------------------------
# overlay


def test_overlay_modify_one(tmp_path):
    lib = synth.diamond()
    clean = Sandbox(lib.write(tmp_path / "clean"))
    dirty = Sandbox(tmp_path / "dirty")
    sync(clean, dirty)
    new = lib.render("d") + "thm extra : 1 = 1 by evaluation;\n"
    touched = overlay(dirty, CommitRequest("u", "m", (Change("d.fml", Action.MODIFY, new.encode()),)))
    assert touched == {"d.fml"}
    assert diff_trees(dirty, clean).copy == {"d.fml"}


def test_overlay_rejects_traversal_before_writing(tmp_path):
    sb = write_tree(tmp_path / "sb", {"a.fml": b"x"})
    request = CommitRequest(
        "u", "m", (Change("b.fml", Action.ADD, b"y"), Change("../evil.fml", Action.ADD, b"z"))
    )
    with pytest.raises(IllegalPath):
        overlay(sb, request)
    assert not (sb.root / "b.fml").exists()
    assert not (tmp_path / "evil.fml").exists()
    for bad in ("state/build.json", "html/a.html", "A.fml", "a.txt"):
        with pytest.raises(IllegalPath):
            overlay(sb, CommitRequest("u", "m", (Change(bad, Action.ADD, b"."),)))


def test_overlay_delete_and_add_together(tmp_path):
    sb = write_tree(tmp_path / "sb", {"a.fml": b"x"})
    overlay(sb, CommitRequest("u", "m", (Change("a.fml", Action.DELETE), Change("b.fml", Action.ADD, b"y"))))
    assert sorted(sb.walk()) == ["b.fml"]


# --------------------------------------------------------------------------
# promote


def test_promote_then_identical(tmp_path):
    dirty = coherent_sandbox(tmp_path / "dirty", synth.diamond())
    clean = Sandbox(tmp_path / "clean")
    promote(dirty, clean)
    assert not diff_trees(clean, dirty)
    assert is_valid(clean)


def test_promote_refuses_failed_state(tmp_path):
    lib = synth.diamond()
    clean = Sandbox(tmp_path / "clean")
    promote(coherent_sandbox(tmp_path / "ok", lib), clean)
    before = tree_hash(clean)

    dirty = Sandbox(lib.write(tmp_path / "bad"))
    (dirty.root / "d.fml").write_text(lib.render("d") + "thm f : 1 = 2 by evaluation;\n")
    state, _ = verify_library({p.stem: p.read_bytes() for p in dirty.root.glob("*.fml")})
    state.save(dirty.root)
    with pytest.raises(PromoteIncoherent):
        promote(dirty, clean)
    assert tree_hash(clean) == before


def _crash_points(tmp_path) -> int:
    """How many os.replace calls one promote performs."""
    old_lib, new_lib = _libraries()
    clean = Sandbox(tmp_path / "probe_clean")
    promote(coherent_sandbox(tmp_path / "probe_old", old_lib), clean)
    dirty = coherent_sandbox(tmp_path / "probe_new", new_lib)
    count = 0
    real = os.replace

    def counting(src, dst):
        nonlocal count
        count += 1
        return real(src, dst)

    os.replace = counting
    try:
        promote(dirty, clean)
    finally:
        os.replace = real
    return count


def _libraries():
    old = synth.diamond()
    new = old.copy()
    new.articles["e"] = synth.ArticleModel("e", ["d"], k=1, src="d")
    new.articles["d"].extras.append(("more", 4))
    return old, new


def test_promote_crash_at_every_point_recovers_old_or_new(tmp_path, monkeypatch):
    old_lib, new_lib = _libraries()
    total = _crash_points(tmp_path)
    assert total > 3
    outcomes = set()
    for k in range(1, total + 1):
        base = tmp_path / f"run{k}"
        clean = Sandbox(base / "clean")
        promote(coherent_sandbox(base / "old", old_lib), clean)
        old_hash = tree_hash(clean)
        dirty = coherent_sandbox(base / "new", new_lib)
        new_hash = tree_hash(dirty)

        real = os.replace
        calls = 0

        def crashing(src, dst):
            nonlocal calls
            calls += 1
            if calls == k:
                raise KeyboardInterrupt("simulated crash")
            return real(src, dst)

        monkeypatch.setattr(os, "replace", crashing)
        with pytest.raises(KeyboardInterrupt):
            promote(dirty, clean)
        monkeypatch.setattr(os, "replace", real)

        # Before recovery the marker either vouches for a complete tree or for nothing.
        if is_valid(clean):
            assert tree_hash(clean) in (old_hash, new_hash)
        what = recover(clean)
        after = tree_hash(clean)
        assert after in (old_hash, new_hash), f"mixed tree after crash at replace #{k}"
        assert is_valid(clean)
        assert not (clean.root / PROMOTE_DIR).exists()
        outcomes.add((what, after == new_hash))
    assert ("discarded", False) in outcomes
    assert ("completed", True) in outcomes
