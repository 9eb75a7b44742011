"""Command line interface: ``fwiki <command> ...``.

Exit status: 0 success, 1 rejected or verification failure, 2 usage error,
3 infrastructure error (lock busy, IO, backend failure).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from fwiki import __version__, kernels
from fwiki.backends import BackendError
from fwiki.changes import Action, Change, CommitRequest
from fwiki.depgraph import GraphError, extract_deps
from fwiki.lang import ParseError
from fwiki.repo import (
    AuthFailure,
    LockBusy,
    NothingToRelease,
    RepoConfig,
    RepoError,
    Repository,
    SeedIncoherent,
    hook_post_commit,
    hook_post_receive,
    hook_pre_commit,
    init_repo,
    submit,
)
from fwiki.verifier import COHERENT

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_USAGE = 2
EXIT_INFRA = 3


class UsageError(Exception):
    pass


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _load_config(args) -> RepoConfig:
    return RepoConfig.load(args.repo)


def cmd_init(args) -> int:
    config = RepoConfig(
        central=Path(args.central),
        frontend=Path(args.frontend),
        publish=Path(args.publish),
        workers=args.workers,
        mirror=Path(args.mirror) if args.mirror else None,
    )
    try:
        repo, token = init_repo(config, args.seed, backend=args.backend, admin_token=args.admin_token)
    except SeedIncoherent as exc:
        print(exc, file=sys.stderr)
        return EXIT_REJECTED
    payload = {"central": str(config.central), "backend": repo.backend.kind, "admin_token": token}
    _emit(args, payload, f"initialised {config.central} ({repo.backend.kind} backend)\nadmin token: {token}")
    return EXIT_OK


def _request_from_args(args) -> CommitRequest:
    if args.request:
        data = json.loads(Path(args.request).read_text("utf-8"))
        changes = []
        for c in data.get("changes", []):
            payload = c.get("payload")
            changes.append(Change(c["path"], Action(c["action"]), None if payload is None else payload.encode("utf-8")))
        return CommitRequest(data.get("author", args.author), data.get("message", args.message), tuple(changes))
    changes = []
    for action, value in args.changes:
        if action is Action.DELETE:
            path = Path(value).name
            changes.append(Change(path if path.endswith(".fml") else f"{path}.fml", action))
        else:
            changes.append(Change(Path(value).name, action, Path(value).read_bytes()))
    if not changes:
        raise UsageError("nothing to submit: give --add, --modify, --delete or --request")
    return CommitRequest(args.author, args.message, tuple(changes))


def cmd_submit(args) -> int:
    config = _load_config(args)
    request = _request_from_args(args)
    result = submit(config, request)
    _emit(args, result.to_json(), result.summary())
    return EXIT_OK if result.accepted else EXIT_REJECTED


def cmd_verify(args) -> int:
    repo = Repository(_load_config(args))
    state, verified = repo.verify(full=args.full)
    if args.state_out:
        Path(args.state_out).write_bytes(state.to_bytes())
    failed = sorted(n for n, r in state.records.items() if not r.verified)
    payload = {"library_verdict": state.library_verdict, "verified": sorted(verified), "failed": failed}
    lines = [f"library: {state.library_verdict} ({len(state.records)} articles, {len(verified)} verified now)"]
    for name in failed:
        lines.extend(f"  {d}" for d in state.records[name].diagnostics)
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK if state.library_verdict == COHERENT else EXIT_REJECTED


def cmd_release(args) -> int:
    repo = Repository(_load_config(args))
    token = args.token or os.environ.get("FWIKI_ADMIN_TOKEN", "")
    try:
        commit_id = repo.release_stable(token)
    except AuthFailure as exc:
        print(f"release refused: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except NothingToRelease as exc:
        print(exc)
        return EXIT_OK
    _emit(args, {"stable": commit_id}, f"stable -> {commit_id}")
    return EXIT_OK


def cmd_status(args) -> int:
    status = Repository(_load_config(args)).status()
    lines = [
        f"backend: {status['backend']}",
        f"library: {status['library_verdict']} ({status['articles']} articles)",
        f"master:  {status['master']}",
        f"stable:  {status['stable']}",
        f"tags:    {', '.join(status['tags']) or '-'}",
    ]
    if status["last_gate"]:
        lines.append(f"last gate: {status['last_gate']['result']['verdict']}")
    _emit(args, status, "\n".join(lines))
    return EXIT_OK


def cmd_render(args) -> int:
    written = Repository(_load_config(args)).render(full=args.all)
    _emit(args, {"written": sorted(written)}, f"{len(written)} page(s) updated")
    return EXIT_OK


def cmd_deps(args) -> int:
    manifest = extract_deps(args.article)
    sys.stdout.write(manifest.serialize().decode("utf-8"))
    return EXIT_OK


def cmd_hook(args) -> int:
    config = _load_config(args)
    if args.hook == "pre-commit":
        return hook_pre_commit(config)
    if args.hook == "post-commit":
        return hook_post_commit(config, args.commit)
    return hook_post_receive(config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fwiki", description="Gatekeeper for a wiki of machine-checked articles.")
    parser.add_argument("--version", action="version", version=f"fwiki {__version__} ({kernels.BACKEND} kernels)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_repo(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--repo", default=os.environ.get("FWIKI_REPO", "."), help="central repository directory")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        return p

    p = sub.add_parser("init", help="create central, frontend and publish directories")
    p.add_argument("--central", required=True)
    p.add_argument("--frontend", required=True)
    p.add_argument("--publish", required=True)
    p.add_argument("--backend", choices=("plain", "git"), default="plain")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mirror")
    p.add_argument("--admin-token")
    p.add_argument("--json", action="store_true")
    p.add_argument("seed", nargs="?", metavar="SEED_DIR", help="directory of coherent seed articles")
    p.set_defaults(func=cmd_init)

    p = with_repo(sub.add_parser("submit", help="propose a change to master"))
    for flag, action in (("--add", Action.ADD), ("--modify", Action.MODIFY), ("--delete", Action.DELETE)):
        p.add_argument(
            flag, dest="changes", action="append", type=lambda v, a=action: (a, v), default=[],
            metavar="NAME" if action is Action.DELETE else "FILE",
        )
    p.add_argument("--request", help="JSON commit request")
    p.add_argument("--author", default=os.environ.get("USER", "anonymous"))
    p.add_argument("-m", "--message", default="")
    p.set_defaults(func=cmd_submit)

    p = with_repo(sub.add_parser("verify", help="re-check master"))
    p.add_argument("--full", action="store_true", help="ignore recorded build state")
    p.add_argument("--state-out", help="write the resulting build state here")
    p.set_defaults(func=cmd_verify)

    p = with_repo(sub.add_parser("release", help="advance stable to master"))
    p.add_argument("--token", help="admin token (or FWIKI_ADMIN_TOKEN)")
    p.set_defaults(func=cmd_release)

    p = with_repo(sub.add_parser("status", help="show branch heads and last gate verdict"))
    p.set_defaults(func=cmd_status)

    p = with_repo(sub.add_parser("render", help="republish HTML"))
    p.add_argument("--all", action="store_true", help="re-render every page")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("deps", help="print the dependency manifest of an article file")
    p.add_argument("article")
    p.set_defaults(func=cmd_deps)

    p = with_repo(sub.add_parser("hook", help="entry points for repository hooks"))
    p.add_argument("hook", choices=("pre-commit", "post-commit", "post-receive"))
    p.add_argument("--commit", help="commit id for post-commit")
    p.set_defaults(func=cmd_hook)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fwiki: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, GraphError, ValueError) as exc:
        print(f"fwiki: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_REJECTED
    except LockBusy as exc:
        print(f"fwiki: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except (RepoError, BackendError, OSError) as exc:
        print(f"fwiki: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
