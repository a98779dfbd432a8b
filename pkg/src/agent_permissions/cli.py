"""``agent-permissions`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .diagnostics import Diagnostic, error, errors_in, summarize
from .discovery import (
    DiscoveryError,
    FetchError,
    FileCache,
    HttpxFetcher,
    InvalidUrl,
    NetworkError,
    ParseFailed,
    TransportError,
    discover,
    fetch_manifest,
)
from .dom import AmbiguityWarning, HtmlParseError, NoMatch, element_from_html
from .engine import (
    ClockRegression,
    DefaultPolicy,
    EnforcementState,
    Outcome,
    PermissionQuery,
    ReleaseWithoutAcquire,
    acquire,
    evaluate,
    guidelines_for,
    release,
    render_explanation,
)
from .generator import (
    AllInputsFailed,
    NoInputs,
    PolicyError,
    SoundnessError,
    compile_policies,
    load_corpus,
    load_policies,
)
from .manifest import Manifest, ParseError, parse_manifest, serialize_manifest
from .selectors import ElementDescriptor, SelectorError
from .validation import is_rfc3339, validate_manifest

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NETWORK = 3
EXIT_INTERNAL = 4

CACHE_ENV = "AGENT_PERMISSIONS_CACHE_DIR"


class CliError(Exception):
    def __init__(self, code: int, message: str, diagnostics: Sequence[Diagnostic] = ()):
        super().__init__(message)
        self.code = code
        self.diagnostics = list(diagnostics)


class _Output:
    """Collects text lines, or one JSON object in ``--json`` mode."""

    def __init__(self, as_json: bool):
        self.as_json = as_json
        self.data: dict[str, Any] = {}

    def line(self, text: str = "") -> None:
        if not self.as_json:
            print(text)

    def block(self, text: str) -> None:
        if not self.as_json:
            sys.stdout.write(text if text.endswith("\n") or not text else text + "\n")

    def set(self, **fields: Any) -> None:
        self.data.update(fields)

    def note(self, text: str) -> None:
        print(text, file=sys.stderr)

    def finish(self, code: int) -> int:
        if self.as_json:
            self.data.setdefault("exit_code", code)
            print(json.dumps(self.data, indent=2, sort_keys=False))
        return code


# --- Inputs ---------------------------------------------------------------------


def _is_url(source: str) -> bool:
    return source.startswith(("http://", "https://"))


def _cache(args) -> FileCache | None:
    directory = getattr(args, "cache_dir", None) or os.environ.get(CACHE_ENV)
    return FileCache(directory) if directory else None


def _read_source(source: str) -> bytes:
    if source == "-":
        return sys.stdin.buffer.read()
    try:
        return Path(source).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read {source}: {exc.strerror or exc}") from None


def _load_manifest(source: str, args, *, strict: bool) -> tuple[Manifest, list[Diagnostic]]:
    """Load from a path, ``-`` or URL. Fatal parse problems become CliError(1)."""
    if _is_url(source):
        try:
            got = fetch_manifest(source, HttpxFetcher(), _cache(args), time.time())
        except InvalidUrl as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
        except FetchError as exc:
            if isinstance(exc, ParseFailed):
                raise CliError(EXIT_FAIL, str(exc), exc.diagnostics) from None
            raise CliError(EXIT_NETWORK, f"cannot fetch {source}: {exc}") from None
        manifest = got.manifest
    else:
        try:
            manifest = parse_manifest(_read_source(source), strict=False)
        except ParseError as exc:
            diag = error(exc.code, exc.path, str(exc))
            raise CliError(EXIT_FAIL, str(exc), [diag]) from None
    diagnostics = validate_manifest(manifest)
    if strict and errors_in(diagnostics):
        raise CliError(EXIT_FAIL, "manifest has errors", diagnostics)
    return manifest, diagnostics


def _element(args) -> ElementDescriptor:
    if args.element_json:
        try:
            data = json.loads(_read_source(args.element_json))
            return ElementDescriptor.from_dict(data)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise CliError(EXIT_USAGE, f"bad element description: {exc}") from None
    if not args.target:
        raise CliError(EXIT_USAGE, "--html needs --target")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AmbiguityWarning)
        try:
            element = element_from_html(_read_source(args.html), args.target)
        except SelectorError as exc:
            raise CliError(EXIT_USAGE, f"bad --target selector: {exc}") from None
        except (NoMatch, HtmlParseError) as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return element


# --- Commands -------------------------------------------------------------------


def cmd_validate(args, out: _Output) -> int:
    try:
        _, diagnostics = _load_manifest(args.source, args, strict=False)
    except CliError as exc:
        if exc.code != EXIT_FAIL or not exc.diagnostics:
            raise
        diagnostics = exc.diagnostics
    for d in diagnostics:
        out.line(str(d))
    out.line(summarize(diagnostics))
    code = EXIT_FAIL if errors_in(diagnostics) else EXIT_OK
    out.set(valid=code == EXIT_OK, summary=summarize(diagnostics),
            diagnostics=[d.to_dict() for d in diagnostics])
    return code


def _query(args) -> PermissionQuery:
    now = args.now if args.now is not None else time.time()
    return PermissionQuery(args.verb, _element(args), now)


def cmd_check(args, out: _Output) -> int:
    manifest, _ = _load_manifest(args.source, args, strict=False)
    query = _query(args)
    defaults = DefaultPolicy(args.defaults)
    if args.state:
        state = _load_state(args.state)
        try:
            decision = acquire(manifest, query, state, defaults)
        except ClockRegression as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
        state.save(args.state)
    else:
        decision = evaluate(manifest, query, None, defaults)
    out.line(decision.summary())
    if args.explain:
        out.block(render_explanation(manifest, query, decision))
    out.set(summary=decision.summary(), decision=decision.to_dict())
    if args.explain:
        out.set(explanation=render_explanation(manifest, query, decision).splitlines())
    return EXIT_FAIL if decision.outcome is Outcome.DENY else EXIT_OK


def cmd_explain(args, out: _Output) -> int:
    manifest, _ = _load_manifest(args.source, args, strict=False)
    query = _query(args)
    state = _load_state(args.state) if args.state else None
    decision = evaluate(manifest, query, state, DefaultPolicy(args.defaults))
    text = render_explanation(manifest, query, decision)
    out.block(text)
    out.set(summary=decision.summary(), explanation=text.splitlines(), decision=decision.to_dict())
    return EXIT_OK


def cmd_guidelines(args, out: _Output) -> int:
    manifest, _ = _load_manifest(args.source, args, strict=False)
    text = guidelines_for(manifest)
    out.block(text)
    out.set(
        prompt=text,
        guidelines=[
            {"directive": g.directive, "description": g.description, "exceptions": g.exceptions}
            for g in manifest.action_guidelines
        ],
    )
    return EXIT_OK


def cmd_release(args, out: _Output) -> int:
    manifest, _ = _load_manifest(args.source, args, strict=False)
    state = _load_state(args.state)
    try:
        release(state, manifest, args.rule)
    except ReleaseWithoutAcquire as exc:
        out.note(f"error: {exc}")
        out.set(released=False, error=str(exc))
        return EXIT_FAIL
    state.save(args.state)
    out.line(f"released slot for rule {args.rule}")
    out.set(released=True, rule=args.rule)
    return EXIT_OK


def cmd_fetch(args, out: _Output) -> int:
    try:
        result = discover(args.url, HttpxFetcher(), _cache(args), time.time())
    except InvalidUrl as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    except (NetworkError, TransportError) as exc:
        raise CliError(EXIT_NETWORK, str(exc)) from None
    for d in result.diagnostics:
        out.note(str(d))
    out.set(**result.to_dict())
    if result.manifest is None:
        out.line("source: none")
        return EXIT_FAIL
    out.line(f"source: {result.source.value} {result.source_url}")
    out.block(serialize_manifest(result.manifest).decode("utf-8"))
    return EXIT_OK


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def cmd_generate(args, out: _Output) -> int:
    try:
        policy_file = load_policies(args.policies)
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot read {args.policies}: {exc.strerror or exc}") from None
    except PolicyError as exc:
        raise CliError(EXIT_USAGE, f"invalid policy file: {exc}") from None
    try:
        corpus, load_diags = load_corpus(
            args.input,
            max_pages=args.max_pages,
            max_depth=args.max_depth,
            delay=args.delay,
            workers=args.workers,
        )
    except NoInputs as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    except AllInputsFailed as exc:
        code = EXIT_NETWORK if all(_is_url(i) for i in args.input) else EXIT_FAIL
        raise CliError(code, str(exc), exc.diagnostics) from None
    except DiscoveryError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None

    try:
        metadata = dict(policy_file.metadata or {})
        if args.last_updated:
            metadata["last_updated"] = args.last_updated
        manifest, report = compile_policies(policy_file.policies, corpus, metadata)
    except SoundnessError as exc:
        raise CliError(EXIT_FAIL, f"soundness check failed, nothing written: {exc}") from None
    report.diagnostics[:0] = load_diags

    as_json = out.as_json or args.report == "json"
    rendered = json.dumps(report.to_dict(), indent=2) + "\n" if as_json else report.to_text()
    body = serialize_manifest(manifest)

    code = EXIT_OK
    if args.strict and report.unsynthesizable:
        code = EXIT_FAIL
    elif args.out:
        _write_atomic(Path(args.out), body)

    if out.as_json:
        out.set(report=report.to_dict(), written=args.out if code == EXIT_OK else None)
        if not args.out:
            out.set(manifest=json.loads(body))
    else:
        report_stream = sys.stdout if args.out else sys.stderr
        report_stream.write(rendered)
        if not args.out and code == EXIT_OK:
            sys.stdout.write(body.decode("utf-8"))
        if code != EXIT_OK:
            print("error: unsynthesizable elements with --strict; nothing written", file=sys.stderr)
    return code


def _load_state(path: str) -> EnforcementState:
    try:
        return EnforcementState.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_USAGE, f"unreadable state file {path}: {exc}") from None


# --- Parser ---------------------------------------------------------------------


def _add_element_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--verb", required=True, help="action verb, e.g. click_element")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--html", metavar="FILE", help="HTML file containing the target element")
    src.add_argument("--element-json", metavar="FILE", help="JSON element description")
    p.add_argument("--target", metavar="SELECTOR", help="locates the element inside --html")
    p.add_argument("--defaults", choices=[d.value for d in DefaultPolicy], default="allow",
                   help="outcome when no rule matches (default: allow)")
    p.add_argument("--now", type=float, metavar="SECONDS",
                   help="query timestamp in POSIX seconds (default: current time)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agent-permissions",
        description="Validate, discover, evaluate and generate agent-permissions.json manifests.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--json", action="store_true", help="emit one JSON object on stdout")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("validate", help="lint a manifest")
    p.add_argument("source", help="path, URL, or - for stdin")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("check", help="decide whether an action is permitted")
    p.add_argument("source", help="manifest path, URL, or -")
    _add_element_args(p)
    p.add_argument("--state", metavar="FILE", help="enforcement state file; records admitted actions")
    p.add_argument("--explain", action="store_true", help="append the decision trace")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("explain", help="show how a query is decided")
    p.add_argument("source")
    _add_element_args(p)
    p.add_argument("--state", metavar="FILE", help="read (never write) enforcement state")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("guidelines", help="render the action guidelines as an agent prompt")
    p.add_argument("source")
    p.set_defaults(func=cmd_guidelines)

    p = sub.add_parser("release", help="return a concurrency slot taken by check --state")
    p.add_argument("source")
    p.add_argument("--state", required=True, metavar="FILE")
    p.add_argument("--rule", required=True, type=int, metavar="INDEX")
    p.set_defaults(func=cmd_release)

    p = sub.add_parser("fetch", help="discover the manifest governing a page")
    p.add_argument("url")
    p.add_argument("--cache-dir", metavar="DIR", help=f"HTTP cache directory (default: ${CACHE_ENV})")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("generate", help="compile owner policies over an HTML corpus")
    p.add_argument("--policies", required=True, metavar="FILE")
    p.add_argument("--input", required=True, nargs="+", metavar="PATH_OR_URL",
                   help="HTML files, directories, or seed URLs")
    p.add_argument("--out", metavar="FILE", help="manifest destination (default: stdout)")
    p.add_argument("--max-pages", type=_positive, default=50, metavar="N")
    p.add_argument("--max-depth", type=_non_negative, default=3, metavar="N")
    p.add_argument("--delay", type=float, default=1.0, metavar="SECONDS",
                   help="politeness delay between requests to one origin")
    p.add_argument("--workers", type=_positive, default=4, metavar="N")
    p.add_argument("--report", choices=["text", "json"], default="text")
    p.add_argument("--last-updated", type=_timestamp, metavar="RFC3339",
                   help="metadata.last_updated for the output (never taken from the clock)")
    p.add_argument("--strict", action="store_true",
                   help="fail when some matched element cannot get a selector")
    p.set_defaults(func=cmd_generate)
    return parser


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _timestamp(text: str) -> str:
    if not is_rfc3339(text):
        raise argparse.ArgumentTypeError("expected an RFC 3339 timestamp")
    return text


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = _Output(args.json)
    try:
        code = args.func(args, out)
    except CliError as exc:
        if out.as_json:
            out.set(error=str(exc), diagnostics=[d.to_dict() for d in exc.diagnostics])
        elif args.command == "validate":
            for d in exc.diagnostics:
                print(str(d))
            print(summarize(exc.diagnostics))
        else:
            for d in exc.diagnostics:
                print(str(d), file=sys.stderr)
            print(f"error: {exc}", file=sys.stderr)
        code = exc.code
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        code = EXIT_INTERNAL
    return out.finish(code)


if __name__ == "__main__":
    sys.exit(main())
