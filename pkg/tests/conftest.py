from __future__ import annotations

from pathlib import Path

import pytest

from fwiki import synth
from fwiki.repo import RepoConfig, Repository, init_repo

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def make_repo(
    root: Path, library: synth.Library | None = None, *, backend: str = "plain", workers: int = 1, **kw
) -> Repository:
    seed = None
    if library is not None:
        seed = library.write(root / "seed")
    config = RepoConfig(root / "central", root / "frontend", root / "publish", workers=workers, **kw)
    repo, _ = init_repo(config, seed, backend=backend, admin_token="letmein")
    return repo


@pytest.fixture
def diamond_repo(tmp_path: Path) -> Repository:
    return make_repo(tmp_path, synth.diamond())
