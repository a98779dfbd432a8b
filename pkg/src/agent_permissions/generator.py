"""Compile declarative owner policies against an HTML corpus into a manifest."""

from __future__ import annotations

import itertools
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, Sequence
from urllib.parse import urldefrag, urljoin, urlsplit

from jsonschema.exceptions import best_match

from .diagnostics import Diagnostic, errors_in, info, warning
from .discovery import (
    DiscoveryError,
    Fetcher,
    HttpxFetcher,
    check_url,
    get_following_redirects,
    origin_of,
)
from .dom import HtmlParseError, Node, parse_html
from .manifest import (
    ActionGuideline,
    Manifest,
    Metadata,
    Modifiers,
    ParseError,
    ResourceRule,
    manifest_from_dict,
)
from .selectors import (
    ElementDescriptor,
    SelectorError,
    SelectorList,
    escape_ident,
    matches,
    parse_selector,
    quote_string,
    split_tokens,
)
from .validation import schema_validator, validate_manifest

STABLE_ATTRIBUTES = ("name", "type", "href", "action")
DEFAULT_SCHEMA_VERSION = "1.0"


class GeneratorError(Exception):
    pass


class PolicyError(GeneratorError, ValueError):
    """The policy file or one of its policies is malformed."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class NoInputs(GeneratorError, ValueError):
    pass


class AllInputsFailed(GeneratorError):
    def __init__(self, diagnostics: Sequence[Diagnostic]):
        super().__init__("every corpus input failed to load")
        self.diagnostics = tuple(diagnostics)


class Unsynthesizable(GeneratorError):
    pass


class SoundnessError(GeneratorError):
    """An emitted selector does not match exactly its policy's elements."""


# --- Policies -------------------------------------------------------------------


@dataclass(frozen=True)
class ElementPredicate:
    """Conjunction of element tests. Unset fields do not constrain."""

    tag: str | None = None
    text_contains: str | None = None
    attributes: tuple[tuple[str, str], ...] = ()
    css: str | None = None
    any: bool = False
    css_ast: SelectorList | None = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "css_ast", parse_selector(self.css) if self.css else None)

    @property
    def is_css_only(self) -> bool:
        return self.tag is None and self.text_contains is None and not self.attributes and (
            self.css is not None or self.any
        )

    @property
    def verbatim_selector(self) -> str:
        return self.css if self.css is not None else "*"

    def test(self, node: Node, descriptor: ElementDescriptor) -> bool:
        if self.tag is not None and node.tag != self.tag.lower():
            return False
        for name, value in self.attributes:
            if node.attrs.get(name.lower()) != value:
                return False
        if self.text_contains is not None:
            if self.text_contains.casefold() not in node.own_text.casefold():
                return False
        if self.css_ast is not None and not matches(self.css_ast, descriptor):
            return False
        return True


@dataclass(frozen=True)
class PolicySpec:
    effect: str | None = None
    verb: str | None = None
    match: ElementPredicate | None = None
    modifiers: Modifiers | None = None
    guideline: ActionGuideline | None = None

    def __post_init__(self) -> None:
        if self.match is None and self.guideline is None:
            raise PolicyError("a policy needs a match or a guideline")
        if self.match is not None:
            if self.effect not in ("allow", "deny"):
                raise PolicyError(f"effect must be 'allow' or 'deny', got {self.effect!r}")
            if not self.verb:
                raise PolicyError("a policy with a match needs a verb")
        if self.modifiers is not None and self.effect != "allow":
            raise PolicyError("modifiers are only allowed with effect 'allow'")

    @property
    def allowed(self) -> bool:
        return self.effect == "allow"


@dataclass(frozen=True)
class PolicyFile:
    policies: tuple[PolicySpec, ...]
    metadata: dict[str, Any] = field(default_factory=dict)


def _trial_manifest(rules: list[dict], guidelines: list[dict]) -> Manifest:
    """Parse fragments through the manifest reader so both share one grammar."""
    doc = {
        "metadata": {"schema_version": DEFAULT_SCHEMA_VERSION},
        "resource_rules": rules,
        "action_guidelines": guidelines,
    }
    return manifest_from_dict(doc, strict=True)


def policy_from_dict(obj: dict[str, Any], path: str = "$") -> PolicySpec:
    match = mods = guideline = None
    if "match" in obj:
        raw = obj["match"]
        try:
            match = ElementPredicate(
                tag=raw.get("tag"),
                text_contains=raw.get("text_contains"),
                attributes=tuple(sorted(raw.get("attr", {}).items())),
                css=raw.get("css"),
                any=bool(raw.get("any", False)),
            )
        except SelectorError as exc:
            raise PolicyError(f"invalid css selector: {exc}", f"{path}.match.css") from None
    try:
        if "modifiers" in obj:
            rule = {"verb": obj.get("verb") or "click_element", "selector": "*", "allowed": True,
                    "modifiers": obj["modifiers"]}
            mods = _trial_manifest([rule], []).resource_rules[0].modifiers
        if "guideline" in obj:
            guideline = _trial_manifest([], [obj["guideline"]]).action_guidelines[0]
    except ParseError as exc:
        sub = exc.path.replace("$.resource_rules[0]", path).replace("$.action_guidelines[0]", f"{path}.guideline")
        raise PolicyError(str(exc), sub) from None
    try:
        return PolicySpec(obj.get("effect"), obj.get("verb"), match, mods, guideline)
    except PolicyError as exc:
        raise PolicyError(str(exc).split(": ", 1)[1], path) from None


def parse_policies(raw: bytes | str) -> PolicyFile:
    """Parse a policy file: a JSON array, or ``{"metadata": ..., "policies": [...]}``."""
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise PolicyError(f"not valid JSON: {exc}") from None
    best = best_match(schema_validator("policies").iter_errors(doc))
    if best is not None:
        where = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in best.absolute_path
        )
        raise PolicyError(best.message, where)
    if isinstance(doc, list):
        items, metadata, prefix = doc, {}, "$"
    else:
        items, metadata, prefix = doc["policies"], doc.get("metadata", {}), "$.policies"
    policies = tuple(policy_from_dict(p, f"{prefix}[{i}]") for i, p in enumerate(items))
    return PolicyFile(policies, metadata)


def load_policies(path: str | Path) -> PolicyFile:
    return parse_policies(Path(path).read_bytes())


# --- Corpus ---------------------------------------------------------------------


@dataclass(eq=False)
class CorpusDocument:
    source: str
    root: Node
    nodes: list[Node] = field(init=False, repr=False)
    descriptors: list[ElementDescriptor] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.nodes = list(self.root.iter())
        self.descriptors = [n.descriptor() for n in self.nodes]

    @classmethod
    def from_html(cls, source: str, document: bytes | str) -> CorpusDocument:
        return cls(source, parse_html(document))

    def elements(self) -> list[CorpusElement]:
        return [CorpusElement(self, i) for i in range(len(self.nodes))]


class CorpusElement(NamedTuple):
    document: CorpusDocument
    position: int

    @property
    def node(self) -> Node:
        return self.document.nodes[self.position]

    @property
    def descriptor(self) -> ElementDescriptor:
        return self.document.descriptors[self.position]

    def __repr__(self) -> str:
        return f"<{self.descriptor.summary()} in {self.document.source}>"


def corpus_elements(corpus: Sequence[CorpusDocument]) -> list[CorpusElement]:
    return [el for doc in corpus for el in doc.elements()]


def select_corpus(corpus: Sequence[CorpusDocument], selector: SelectorList | str) -> list[CorpusElement]:
    """Every corpus element matching *selector*, in corpus order."""
    ast = parse_selector(selector) if isinstance(selector, str) else selector
    return [
        CorpusElement(doc, i)
        for doc in corpus
        for i, d in enumerate(doc.descriptors)
        if matches(ast, d)
    ]


def _is_url(value: str) -> bool:
    return urlsplit(value).scheme in ("http", "https")


def _html_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.suffix.lower() in (".html", ".htm"))
    return [path]


def page_links(root: Node, base: str) -> list[str]:
    out = []
    for node in root.iter():
        if node.tag in ("a", "area") and node.attrs.get("href"):
            url, _ = urldefrag(urljoin(base, node.attrs["href"].strip()))
            if _is_url(url) and url not in out:
                out.append(url)
    return out


class _Politeness:
    """Per-origin request spacing shared by the crawl workers."""

    def __init__(self, delay: float, sleep: Callable[[float], None], clock: Callable[[], float]):
        self.delay = delay
        self.sleep = sleep
        self.clock = clock
        self._next: dict[str, float] = {}
        self._lock = threading.Lock()

    def wait(self, origin: str) -> None:
        with self._lock:
            now = self.clock()
            slot = max(now, self._next.get(origin, now))
            self._next[origin] = slot + self.delay
        if slot > now:
            self.sleep(slot - now)


def load_corpus(
    inputs: Iterable[str | Path],
    *,
    max_pages: int = 50,
    max_depth: int = 3,
    fetcher: Fetcher | None = None,
    delay: float = 1.0,
    workers: int = 4,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.monotonic,
) -> tuple[list[CorpusDocument], list[Diagnostic]]:
    """Load local HTML files and crawl URL seeds breadth-first.

    Returns the documents and the per-input diagnostics. Raises
    :class:`NoInputs` for an empty input list and :class:`AllInputsFailed`
    when nothing at all could be loaded.
    """
    inputs = [str(i) for i in inputs]
    if not inputs:
        raise NoInputs("no corpus inputs given")
    if max_pages < 1 or max_depth < 0:
        raise ValueError("max_pages must be >= 1 and max_depth >= 0")

    docs: list[CorpusDocument] = []
    diags: list[Diagnostic] = []
    seeds = []
    for item in inputs:
        if _is_url(item):
            seeds.append(urldefrag(item)[0])
            continue
        for path in _html_files(Path(item)):
            try:
                docs.append(CorpusDocument.from_html(str(path), path.read_bytes()))
            except (OSError, HtmlParseError) as exc:
                diags.append(warning("INPUT_FAILED", str(path), str(exc)))

    if seeds:
        pages, crawl_diags = _crawl(
            seeds, fetcher or HttpxFetcher(), max_pages, max_depth,
            _Politeness(delay, sleep, clock), workers,
        )
        docs.extend(pages)
        diags.extend(crawl_diags)

    if not docs:
        raise AllInputsFailed(diags)
    return docs, diags


def _crawl(seeds, fetcher, max_pages, max_depth, gate, workers):
    origins = set()
    for seed in seeds:
        check_url(seed)
        origins.add(origin_of(seed))

    def fetch(url: str):
        gate.wait(origin_of(url))
        hops: list[Diagnostic] = []
        resp = get_following_redirects(fetcher, url, {"Accept": "text/html"}, 5 * 1024 * 1024, hops)
        if resp.status != 200:
            raise DiscoveryError(f"HTTP {resp.status}")
        ctype = resp.headers.get("content-type", "text/html")
        if "html" not in ctype:
            raise DiscoveryError(f"not HTML ({ctype})")
        return resp.url, parse_html(resp.body)

    docs, diags = [], []
    seen = set(dict.fromkeys(seeds))
    level = [(s, 0) for s in dict.fromkeys(seeds)]
    fetched = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while level and fetched < max_pages:
            batch = level[: max_pages - fetched]
            fetched += len(batch)
            futures = [pool.submit(fetch, url) for url, _ in batch]
            next_level = []
            for (url, depth), fut in zip(batch, futures):
                try:
                    final_url, root = fut.result()
                except (DiscoveryError, HtmlParseError) as exc:
                    diags.append(warning("INPUT_FAILED", url, str(exc)))
                    continue
                if final_url != url and final_url in seen:
                    diags.append(info("DUPLICATE_PAGE", url, f"redirects to already loaded {final_url}"))
                    continue
                seen.add(final_url)
                docs.append(CorpusDocument(final_url, root))
                if depth >= max_depth:
                    continue
                for link in page_links(root, final_url):
                    if origin_of(link) in origins and link not in seen:
                        seen.add(link)
                        next_level.append((link, depth + 1))
            level = next_level
    return docs, diags


# --- Selector synthesis ----------------------------------------------------------


def _attribute_selector(name: str, value: str) -> str:
    return f"[{escape_ident(name)}={quote_string(value)}]"


def _class_part(classes: Iterable[str]) -> str:
    return "".join("." + escape_ident(c) for c in classes)


def _ordered_classes(node: Node) -> list[str]:
    return list(dict.fromkeys(split_tokens(node.attrs.get("class", ""))))


def _simple_candidates(node: Node) -> list[str]:
    """Steps (1) to (4) of the preference order."""
    tag = escape_ident(node.tag)
    out = []
    if node.attrs.get("id"):
        out.append("#" + escape_ident(node.attrs["id"]))
    classes = _ordered_classes(node)
    out.extend(tag + _class_part([c]) for c in classes)
    out.extend(tag + _class_part(pair) for pair in itertools.combinations(classes, 2))
    if len(classes) > 2:
        out.append(tag + _class_part(classes))
    out.extend(
        tag + _attribute_selector(a, node.attrs[a]) for a in STABLE_ATTRIBUTES if a in node.attrs
    )
    return out


def _compound(node: Node) -> str:
    """Most specific compound for *node* without an id; used on structural paths."""
    part = escape_ident(node.tag) + _class_part(_ordered_classes(node))
    return part + "".join(
        _attribute_selector(a, node.attrs[a]) for a in STABLE_ATTRIBUTES if a in node.attrs
    )


class _Synthesizer:
    def __init__(self, corpus: Sequence[CorpusDocument]):
        self.corpus = corpus
        self._cache: dict[str, frozenset[CorpusElement]] = {}

    def matched(self, selector: str) -> frozenset[CorpusElement]:
        if selector not in self._cache:
            self._cache[selector] = frozenset(select_corpus(self.corpus, selector))
        return self._cache[selector]

    def _fits(self, selector: str, target: CorpusElement, allowed: frozenset) -> bool:
        found = self.matched(selector)
        return target in found and found <= allowed

    def synthesize(self, target: CorpusElement, allowed: frozenset | None = None) -> str:
        allowed = allowed if allowed is not None else frozenset({target})
        node = target.node
        for cand in _simple_candidates(node):
            if self._fits(cand, target, allowed):
                return cand
        chain = [node, *node.ancestors()]
        for k in range(1, len(chain)):
            anchor_el = CorpusElement(target.document, target.document.nodes.index(chain[k]))
            anchor = next(
                (c for c in _simple_candidates(chain[k]) if self._fits(c, anchor_el, frozenset({anchor_el}))),
                None,
            )
            if anchor is None:
                continue
            path = " > ".join([anchor, *(_compound(n) for n in reversed(chain[:k]))])
            if self._fits(path, target, allowed):
                return path
        path = " > ".join(_compound(n) for n in reversed(chain))
        if self._fits(path, target, allowed):
            return path
        raise Unsynthesizable(f"no selector isolates {target!r}")

    def shared(self, targets: Sequence[CorpusElement]) -> str | None:
        """A single class or attribute selector matching exactly *targets*, if any."""
        want = frozenset(targets)
        nodes = [t.node for t in targets]
        tags = {n.tag for n in nodes}
        tag = escape_ident(nodes[0].tag) if len(tags) == 1 else ""
        common = [c for c in _ordered_classes(nodes[0]) if all(c in _ordered_classes(n) for n in nodes[1:])]
        cands = []
        for c in common:
            if tag:
                cands.append(tag + _class_part([c]))
            cands.append(_class_part([c]))
        for a in STABLE_ATTRIBUTES:
            values = {n.attrs.get(a) for n in nodes}
            if len(values) == 1 and None not in values:
                value = values.pop()
                if tag:
                    cands.append(tag + _attribute_selector(a, value))
                cands.append(_attribute_selector(a, value))
        return next((c for c in cands if self.matched(c) == want), None)


def synthesize_selector(
    el: CorpusElement,
    corpus: Sequence[CorpusDocument],
    allowed: Iterable[CorpusElement] | None = None,
) -> str:
    """Shortest-preference selector matching *el* and nothing else in *corpus*.

    With *allowed*, the selector may also match any element of that set.
    """
    if el.document not in corpus:
        raise ValueError("element does not belong to the corpus")
    return _Synthesizer(corpus).synthesize(el, frozenset(allowed) if allowed is not None else None)


# --- Compilation ----------------------------------------------------------------


@dataclass
class PolicyReport:
    index: int
    kind: str  # "rule", "css", "guideline"
    effect: str | None
    verb: str | None
    match_count: int
    selectors: list[str] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "kind": self.kind,
            "effect": self.effect,
            "verb": self.verb,
            "match_count": self.match_count,
            "selectors": list(self.selectors),
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }


@dataclass
class CompilationReport:
    policies: list[PolicyReport] = field(default_factory=list)
    corpus: list[str] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def all_diagnostics(self) -> list[Diagnostic]:
        return self.diagnostics + [d for p in self.policies for d in p.diagnostics]

    def codes(self) -> list[str]:
        return [d.code for d in self.all_diagnostics]

    @property
    def unsynthesizable(self) -> bool:
        return "UNSYNTHESIZABLE" in self.codes()

    def to_dict(self) -> dict[str, Any]:
        return {
            "corpus": list(self.corpus),
            "policies": [p.to_dict() for p in self.policies],
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }

    def to_text(self) -> str:
        lines = [f"corpus: {len(self.corpus)} document{'s' if len(self.corpus) != 1 else ''}"]
        lines += [f"  {d}" for d in self.diagnostics]
        for p in self.policies:
            if p.kind == "guideline":
                lines.append(f"policy {p.index}: guideline")
            else:
                head = f"policy {p.index}: {p.effect} {p.verb}, {p.match_count} match"
                head += "" if p.match_count == 1 else "es"
                lines.append(head)
                lines += [f"  selector {s}" for s in p.selectors]
            lines += [f"  {d}" for d in p.diagnostics]
        return "\n".join(lines) + "\n"


def _metadata(overrides: dict[str, Any] | None) -> Metadata:
    overrides = dict(overrides or {})
    return Metadata(
        schema_version=overrides.pop("schema_version", DEFAULT_SCHEMA_VERSION),
        last_updated=overrides.pop("last_updated", None),
        author=overrides.pop("author", None),
        extra=overrides,
    )


def compile_policies(
    policies: Sequence[PolicySpec],
    corpus: Sequence[CorpusDocument],
    metadata: dict[str, Any] | None = None,
) -> tuple[Manifest, CompilationReport]:
    """Turn *policies* into a manifest whose selectors are sound over *corpus*."""
    if not policies:
        raise PolicyError("no policies given")
    synth = _Synthesizer(corpus)
    elements = corpus_elements(corpus)
    report = CompilationReport(corpus=[d.source for d in corpus])
    rules: list[ResourceRule] = []
    guidelines: list[ActionGuideline] = []

    def emit(policy: PolicySpec, selector: str) -> None:
        rules.append(
            ResourceRule(policy.verb, selector, policy.allowed, policy.modifiers, len(rules))
        )

    for index, policy in enumerate(policies):
        path = f"$[{index}]"
        if policy.guideline is not None:
            guidelines.append(policy.guideline)
        if policy.match is None:
            report.policies.append(PolicyReport(index, "guideline", None, None, 0))
            continue

        pred = policy.match
        if pred.is_css_only:
            selector = pred.verbatim_selector
            found = synth.matched(selector)
            entry = PolicyReport(index, "css", policy.effect, policy.verb, len(found), [selector])
            if not found:
                entry.diagnostics.append(
                    warning("ZERO_MATCHES", path, "selector matches nothing in the corpus (emitted anyway)")
                )
            report.policies.append(entry)
            emit(policy, selector)
            continue

        targets = [el for el in elements if pred.test(el.node, el.descriptor)]
        entry = PolicyReport(index, "rule", policy.effect, policy.verb, len(targets))
        report.policies.append(entry)
        if not targets:
            entry.diagnostics.append(warning("ZERO_MATCHES", path, "policy matches no element; no rule emitted"))
            continue

        want = frozenset(targets)
        selectors: list[str] = []
        shared = synth.shared(targets) if len(targets) > 1 else None
        if shared is not None:
            selectors.append(shared)
        else:
            for el in targets:
                try:
                    sel = synth.synthesize(el)
                except Unsynthesizable:
                    try:
                        sel = synth.synthesize(el, want)
                        if sel not in selectors:
                            entry.diagnostics.append(
                                info("SCOPED_SELECTOR", path, f"{sel} also covers other matches of this policy")
                            )
                    except Unsynthesizable:
                        entry.diagnostics.append(
                            warning("UNSYNTHESIZABLE", path, f"no supported selector isolates {el!r}; skipped")
                        )
                        continue
                if sel not in selectors:
                    selectors.append(sel)

        covered = frozenset().union(*(synth.matched(s) for s in selectors)) if selectors else frozenset()
        skipped = {el for el in targets if not any(el in synth.matched(s) for s in selectors)}
        if not covered <= want or (covered | skipped) != want:
            raise SoundnessError(f"policy {index}: emitted selectors do not match its element set")
        entry.selectors = selectors
        for sel in selectors:
            emit(policy, sel)

    manifest = Manifest(_metadata(metadata), tuple(rules), tuple(guidelines))
    problems = errors_in(validate_manifest(manifest))
    if problems:
        raise SoundnessError("generated manifest does not validate: " + "; ".join(map(str, problems)))
    return manifest, report


def verify_soundness(
    manifest: Manifest,
    report: CompilationReport,
    corpus: Sequence[CorpusDocument],
    policies: Sequence[PolicySpec],
) -> list[str]:
    """Independent re-check: each rule's selector against its policy's predicate.

    Returns a list of human-readable problems (empty when sound).
    """
    problems = []
    elements = corpus_elements(corpus)
    for entry in report.policies:
        if entry.kind != "rule":
            continue
        pred = policies[entry.index].match
        want = {el for el in elements if pred.test(el.node, el.descriptor)}
        for sel in entry.selectors:
            got = set(select_corpus(corpus, sel))
            if not got <= want:
                problems.append(f"policy {entry.index}: {sel!r} over-captures")
            want -= got
        if want and not any(d.code == "UNSYNTHESIZABLE" for d in entry.diagnostics):
            problems.append(f"policy {entry.index}: {len(want)} element(s) not covered")
    emitted = [r.selector for r in manifest.resource_rules]
    listed = [s for p in report.policies if p.kind != "guideline" for s in p.selectors]
    if emitted != listed:
        problems.append("report selectors differ from manifest rules")
    return problems
