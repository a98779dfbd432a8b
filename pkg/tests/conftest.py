from __future__ import annotations

import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from agent_permissions.discovery import Response


@dataclass
class Route:
    status: int = 200
    body: bytes = b""
    headers: dict[str, str] = field(default_factory=dict)


class FixtureSite:
    """Routes keyed by path; mutable between requests. Records every request."""

    def __init__(self) -> None:
        self.routes: dict[str, Route] = {}
        self.requests: list[tuple[str, dict[str, str]]] = []
        self.base = ""

    def add(self, path: str, body: bytes | str = b"", status: int = 200, **headers: str) -> None:
        if isinstance(body, str):
            body = body.encode()
        self.routes[path] = Route(status, body, {k.replace("_", "-"): v for k, v in headers.items()})

    def url(self, path: str) -> str:
        return self.base + path


def _handler(site: FixtureSite):
    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):  # noqa: N802
            site.requests.append((self.path, {k.lower(): v for k, v in self.headers.items()}))
            route = site.routes.get(self.path, Route(404, b"not found"))
            self.send_response(route.status)
            for k, v in route.headers.items():
                self.send_header(k, v)
            self.send_header("Content-Length", str(len(route.body)))
            self.end_headers()
            self.wfile.write(route.body)

        def log_message(self, *args):
            pass

    return Handler


@pytest.fixture
def http_site():
    site = FixtureSite()
    server = ThreadingHTTPServer(("127.0.0.1", 0), _handler(site))
    site.base = f"http://127.0.0.1:{server.server_address[1]}"
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield site
    finally:
        server.shutdown()
        server.server_close()


class FakeFetcher:
    """In-memory :class:`Fetcher`: maps absolute URLs to responses."""

    def __init__(self, pages: dict[str, Response | tuple] | None = None):
        self.pages: dict[str, Response] = {}
        self.calls: list[tuple[str, dict[str, str]]] = []
        for url, value in (pages or {}).items():
            self.set(url, *value) if isinstance(value, tuple) else self.set(url, value)

    def set(self, url: str, body: bytes | str | Response = b"", status: int = 200, headers=None) -> None:
        if isinstance(body, Response):
            self.pages[url] = body
            return
        if isinstance(body, str):
            body = body.encode()
        self.pages[url] = Response(status, body, {k.lower(): v for k, v in (headers or {}).items()}, url)

    def get(self, url, headers, limit):
        self.calls.append((url, dict(headers)))
        if url not in self.pages:
            return Response(404, b"", {}, url)
        resp = self.pages[url]
        return Response(resp.status, resp.body[: limit + 1], resp.headers, url)


@pytest.fixture
def fake_fetcher():
    return FakeFetcher()


# --- Acceptance summary ---------------------------------------------------------

_criteria: dict[str, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion this test checks")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    label = getattr(report, "criterion", None)
    if label:
        _criteria.setdefault(label, []).append(report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split()[0][2:])):
        status = "PASS" if all(_criteria[label]) else "FAIL"
        terminalreporter.write_line(f"{status}  {label}")
