"""Locating and fetching the manifest that applies to a page.

A ``<link rel="agent-permissions">`` on the page wins; otherwise the origin's
``/.well-known/agent-permissions.json`` applies. All HTTP goes through an
injected :class:`Fetcher` so tests never touch the network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Protocol
from urllib.parse import urljoin, urlsplit, urlunsplit

import httpx

from . import __version__
from .diagnostics import Diagnostic, error, errors_in, info, warning
from .dom import HtmlParseError, parse_html
from .manifest import (
    MEDIA_TYPE,
    WELL_KNOWN_PATH,
    Manifest,
    ParseError,
    manifest_to_dict,
    parse_manifest,
)
from .selectors import split_tokens
from .validation import validate_manifest

log = logging.getLogger(__name__)

DEFAULT_TTL = 3600
DEFAULT_MAX_BYTES = 1024 * 1024
DEFAULT_PAGE_MAX_BYTES = 5 * 1024 * 1024
DEFAULT_TIMEOUT = 10.0
MAX_REDIRECTS = 5
DEFAULT_USER_AGENT = f"agent-permissions/{__version__}"
REDIRECT_STATUSES = frozenset({301, 302, 303, 307, 308})
LINK_REL = "agent-permissions"


class DiscoveryError(Exception):
    pass


class InvalidUrl(DiscoveryError, ValueError):
    pass


class FetchError(DiscoveryError):
    def __init__(self, message: str, url: str, status: int | None = None) -> None:
        super().__init__(message)
        self.url = url
        self.status = status


class NotFound(FetchError):
    pass


class TransportError(FetchError):
    pass


class TooManyRedirects(TransportError):
    pass


class TooLarge(FetchError):
    pass


class ParseFailed(FetchError):
    def __init__(self, message: str, url: str, diagnostics: tuple[Diagnostic, ...] = ()) -> None:
        super().__init__(message, url)
        self.diagnostics = diagnostics


class NetworkError(DiscoveryError):
    """The well-known manifest could not be retrieved for transport reasons."""


# --- HTTP capability --------------------------------------------------------------


@dataclass(frozen=True)
class Response:
    status: int
    body: bytes = b""
    headers: Mapping[str, str] = field(default_factory=dict)  # lowercase names
    url: str = ""


class Fetcher(Protocol):
    def get(self, url: str, headers: Mapping[str, str], limit: int) -> Response:
        """GET *url* without following redirects.

        Implementations may stop reading after ``limit + 1`` body bytes and
        raise :class:`TransportError` on connection failures.
        """


class HttpxFetcher:
    def __init__(self, timeout: float = DEFAULT_TIMEOUT, user_agent: str = DEFAULT_USER_AGENT):
        self.client = httpx.Client(
            timeout=timeout, follow_redirects=False, headers={"User-Agent": user_agent}
        )

    def get(self, url: str, headers: Mapping[str, str], limit: int) -> Response:
        try:
            with self.client.stream("GET", url, headers=dict(headers)) as resp:
                chunks, size = [], 0
                for chunk in resp.iter_bytes():
                    chunks.append(chunk)
                    size += len(chunk)
                    if size > limit:
                        break
                return Response(
                    resp.status_code,
                    b"".join(chunks),
                    {k.lower(): v for k, v in resp.headers.items()},
                    str(resp.url),
                )
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}", url) from exc

    def close(self) -> None:
        self.client.close()


def check_url(url: str) -> str:
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.netloc:
        raise InvalidUrl(f"not an absolute http(s) URL: {url!r}")
    return url


def origin_of(url: str) -> str:
    parts = urlsplit(url)
    return urlunsplit((parts.scheme, parts.netloc, "", "", ""))


def get_following_redirects(
    fetcher: Fetcher,
    url: str,
    headers: Mapping[str, str],
    limit: int,
    diagnostics: list[Diagnostic],
) -> Response:
    current = url
    for hop in range(MAX_REDIRECTS + 1):
        resp = fetcher.get(current, headers, limit)
        location = resp.headers.get("location")
        if resp.status not in REDIRECT_STATUSES or not location:
            return Response(resp.status, resp.body, resp.headers, resp.url or current)
        if hop == MAX_REDIRECTS:
            break
        target = urljoin(current, location.strip())
        diagnostics.append(info("REDIRECT", current, f"{resp.status} redirect to {target}"))
        current = target
    raise TooManyRedirects(f"more than {MAX_REDIRECTS} redirects", url)


# --- Cache ------------------------------------------------------------------------


@dataclass(frozen=True)
class CacheEntry:
    key: str
    body: bytes
    stored_at: float
    ttl_seconds: int
    etag: str | None = None
    last_modified: str | None = None

    def is_fresh(self, now: float) -> bool:
        return now < self.stored_at + self.ttl_seconds

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "body": base64.b64encode(self.body).decode("ascii"),
            "stored_at": self.stored_at,
            "ttl_seconds": self.ttl_seconds,
            "etag": self.etag,
            "last_modified": self.last_modified,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CacheEntry:
        return cls(
            key=data["key"],
            body=base64.b64decode(data["body"]),
            stored_at=float(data["stored_at"]),
            ttl_seconds=int(data["ttl_seconds"]),
            etag=data.get("etag"),
            last_modified=data.get("last_modified"),
        )


class CacheStore(Protocol):
    def get(self, key: str) -> CacheEntry | None: ...

    def put(self, entry: CacheEntry) -> None: ...


class MemoryCache:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}

    def get(self, key: str) -> CacheEntry | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, entry: CacheEntry) -> None:
        with self._lock:
            self._entries[entry.key] = entry


class FileCache:
    """One JSON file per URL, named by the URL's SHA-256."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / (hashlib.sha256(key.encode("utf-8")).hexdigest() + ".json")

    def get(self, key: str) -> CacheEntry | None:
        path = self._path(key)
        with self._lock:
            try:
                entry = CacheEntry.from_dict(json.loads(path.read_text()))
            except FileNotFoundError:
                return None
            except (ValueError, KeyError) as exc:
                log.warning("ignoring corrupt cache file %s: %s", path, exc)
                return None
        return entry if entry.key == key else None

    def put(self, entry: CacheEntry) -> None:
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                json.dump(entry.to_dict(), fh)
            os.replace(tmp, self._path(entry.key))


_MAX_AGE = re.compile(r"(?:^|,)\s*max-age\s*=\s*\"?(\d+)\"?", re.IGNORECASE)


def cache_policy(headers: Mapping[str, str], default_ttl: int = DEFAULT_TTL) -> int | None:
    """TTL in seconds from Cache-Control, or None when the response must not be stored."""
    value = headers.get("cache-control", "")
    directives = {d.strip().split("=")[0].lower() for d in value.split(",") if d.strip()}
    if "no-store" in directives:
        return None
    if "no-cache" in directives:
        return 0
    m = _MAX_AGE.search(value)
    return int(m.group(1)) if m else default_ttl


# --- Manifest fetching -------------------------------------------------------------


@dataclass(frozen=True)
class FetchedManifest:
    manifest: Manifest
    cache_status: str  # fresh | revalidated | from_cache | miss
    url: str
    diagnostics: tuple[Diagnostic, ...] = ()


def _lenient(body: bytes, url: str) -> tuple[Manifest, list[Diagnostic]]:
    try:
        manifest = parse_manifest(body, strict=False)
    except ParseError as exc:
        raise ParseFailed(f"unparseable manifest at {url}: {exc}", url, exc.diagnostics) from exc
    return manifest, errors_in(validate_manifest(manifest))


def fetch_manifest(
    url: str,
    fetcher: Fetcher,
    cache: CacheStore | None,
    now: float,
    *,
    max_bytes: int = DEFAULT_MAX_BYTES,
    default_ttl: int = DEFAULT_TTL,
) -> FetchedManifest:
    check_url(url)
    diagnostics: list[Diagnostic] = []
    entry = cache.get(url) if cache is not None else None
    if entry is not None and entry.is_fresh(now):
        manifest, problems = _lenient(entry.body, url)
        return FetchedManifest(manifest, "from_cache", url, tuple(problems))

    headers = {"Accept": MEDIA_TYPE}
    if entry is not None:
        if entry.etag:
            headers["If-None-Match"] = entry.etag
        if entry.last_modified:
            headers["If-Modified-Since"] = entry.last_modified
    resp = get_following_redirects(fetcher, url, headers, max_bytes, diagnostics)

    if resp.status == 304 and entry is not None:
        ttl = cache_policy(resp.headers, default_ttl)
        manifest, problems = _lenient(entry.body, url)
        if cache is not None and ttl is not None:
            cache.put(
                CacheEntry(
                    url,
                    entry.body,
                    now,
                    ttl,
                    resp.headers.get("etag", entry.etag),
                    resp.headers.get("last-modified", entry.last_modified),
                )
            )
        return FetchedManifest(manifest, "revalidated", url, tuple(diagnostics + problems))
    if resp.status in (404, 410):
        raise NotFound(f"HTTP {resp.status} for {url}", url, resp.status)
    if resp.status != 200:
        raise FetchError(f"HTTP {resp.status} for {url}", url, resp.status)
    if len(resp.body) > max_bytes:
        raise TooLarge(f"manifest at {url} exceeds {max_bytes} bytes", url, resp.status)

    manifest, problems = _lenient(resp.body, url)
    ttl = cache_policy(resp.headers, default_ttl)
    if cache is not None and ttl is not None:
        cache.put(
            CacheEntry(
                url, resp.body, now, ttl, resp.headers.get("etag"), resp.headers.get("last-modified")
            )
        )
    status = "fresh" if entry is not None else "miss"
    return FetchedManifest(manifest, status, url, tuple(diagnostics + problems))


# --- Link tags ----------------------------------------------------------------------


def extract_link_tags(html: bytes | str, base: str) -> list[str]:
    """Absolute hrefs of every ``rel~=agent-permissions`` link, in document order."""
    try:
        root = parse_html(html)
    except HtmlParseError:
        return []
    found = []
    for node in root.iter():
        if node.tag != "link":
            continue
        rels = [t.lower() for t in split_tokens(node.attrs.get("rel", ""))]
        href = node.attrs.get("href", "").strip()
        if LINK_REL not in rels or not href:
            continue
        resolved = urljoin(base, href)
        parts = urlsplit(resolved)
        if parts.scheme in ("http", "https") and parts.netloc:
            found.append(urlunsplit(parts._replace(fragment="")))
    return found


def extract_link_tag(html: bytes | str, base: str) -> str | None:
    found = extract_link_tags(html, base)
    return found[0] if found else None


# --- Discovery ---------------------------------------------------------------------


class Source(str, Enum):
    LINK_TAG = "link-tag"
    WELL_KNOWN = "well-known"
    NONE = "none"


@dataclass(frozen=True)
class DiscoveryResult:
    manifest: Manifest | None
    source: Source
    source_url: str | None
    fetched_at: float
    cache_status: str
    diagnostics: tuple[Diagnostic, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": self.source.value,
            "source_url": self.source_url,
            "fetched_at": self.fetched_at,
            "cache_status": self.cache_status,
            "manifest": manifest_to_dict(self.manifest) if self.manifest is not None else None,
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }


def discover(
    page_url: str,
    fetcher: Fetcher,
    cache: CacheStore | None,
    now: float,
    *,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> DiscoveryResult:
    check_url(page_url)
    diagnostics: list[Diagnostic] = []

    link_url = None
    try:
        page = get_following_redirects(
            fetcher, page_url, {"Accept": "text/html"}, DEFAULT_PAGE_MAX_BYTES, diagnostics
        )
    except TransportError as exc:
        diagnostics.append(warning("PAGE_FETCH_FAILED", page_url, str(exc)))
    else:
        if page.status == 200:
            links = extract_link_tags(page.body, page.url or page_url)
            if links:
                link_url = links[0]
                for extra in links[1:]:
                    diagnostics.append(
                        warning("EXTRA_LINK_TAG", page_url, f"ignoring additional manifest link {extra}")
                    )
        else:
            diagnostics.append(
                warning("PAGE_FETCH_FAILED", page_url, f"HTTP {page.status} fetching the page")
            )

    if link_url is not None:
        try:
            got = fetch_manifest(link_url, fetcher, cache, now, max_bytes=max_bytes)
        except FetchError as exc:
            diagnostics.append(
                warning("LINK_TAG_FAILED", link_url, f"{exc}; falling back to the well-known manifest")
            )
        else:
            return DiscoveryResult(
                got.manifest, Source.LINK_TAG, link_url, now, got.cache_status,
                tuple(diagnostics) + got.diagnostics,
            )

    well_known = origin_of(page_url) + WELL_KNOWN_PATH
    try:
        got = fetch_manifest(well_known, fetcher, cache, now, max_bytes=max_bytes)
    except NotFound:
        return DiscoveryResult(None, Source.NONE, None, now, "miss", tuple(diagnostics))
    except (ParseFailed, TooLarge) as exc:
        diagnostics.extend(getattr(exc, "diagnostics", ()))
        diagnostics.append(error("WELL_KNOWN_UNUSABLE", well_known, str(exc)))
        return DiscoveryResult(None, Source.NONE, None, now, "miss", tuple(diagnostics))
    except FetchError as exc:
        raise NetworkError(f"could not fetch {well_known}: {exc}") from exc
    return DiscoveryResult(
        got.manifest, Source.WELL_KNOWN, well_known, now, got.cache_status,
        tuple(diagnostics) + got.diagnostics,
    )
