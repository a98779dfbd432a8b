"""Minimal static HTML tree and descriptor extraction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from html.parser import HTMLParser
from typing import Iterator

from .selectors import ElementDescriptor, SelectorList, matches, parse_selector

VOID_ELEMENTS = frozenset(
    "area base br col embed hr img input link meta param source track wbr".split()
)
RAW_TEXT_ELEMENTS = frozenset({"script", "style", "template", "noscript"})
# Opening the key tag implicitly closes a currently open element in the value set.
IMPLIED_END = {
    "li": {"li"},
    "p": {"p"},
    "option": {"option"},
    "tr": {"tr", "td", "th"},
    "td": {"td", "th"},
    "th": {"td", "th"},
    "dt": {"dt", "dd"},
    "dd": {"dt", "dd"},
}
CLOSES_P = frozenset(
    "address article aside blockquote div dl fieldset footer form h1 h2 h3 h4 h5 h6 "
    "header hr main nav ol p pre section table ul".split()
)
HEAD_ELEMENTS = frozenset({"head"})


class HtmlParseError(ValueError):
    pass


class NoMatch(LookupError):
    pass


class AmbiguityWarning(UserWarning):
    pass


@dataclass(eq=False)
class Node:
    tag: str
    attrs: dict[str, str] = field(default_factory=dict)
    parent: Node | None = None
    children: list[Node] = field(default_factory=list)
    texts: list[str] = field(default_factory=list)

    def append(self, child: Node) -> None:
        child.parent = self
        self.children.append(child)

    def iter(self) -> Iterator[Node]:
        """Pre-order (document order) walk including this node."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def ancestors(self) -> Iterator[Node]:
        node = self.parent
        while node is not None:
            yield node
            node = node.parent

    @property
    def own_text(self) -> str:
        return " ".join(" ".join(self.texts).split())

    def descriptor(self) -> ElementDescriptor:
        chain = [ElementDescriptor.create(a.tag, a.attrs) for a in self.ancestors()]
        return ElementDescriptor.create(self.tag, self.attrs, chain)


class _TreeBuilder(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.document = Node("#document")
        self.stack: list[Node] = [self.document]
        self.html: Node | None = None

    @property
    def current(self) -> Node:
        return self.stack[-1]

    def handle_starttag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        values: dict[str, str] = {}
        for name, value in attrs:
            values.setdefault(name.lower(), value if value is not None else "")
        if tag == "html":
            if self.html is None:
                self.html = Node("html", values)
                self.document.append(self.html)
                self.stack = [self.document, self.html]
            else:
                for k, v in values.items():
                    self.html.attrs.setdefault(k, v)
            return
        closers = IMPLIED_END.get(tag, set())
        if tag in CLOSES_P:
            closers = closers | {"p"}
        if self.current.tag in closers:
            self.stack.pop()
        node = Node(tag, values)
        self.current.append(node)
        if tag not in VOID_ELEMENTS:
            self.stack.append(node)

    def handle_startendtag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        self.handle_starttag(tag, attrs)
        if tag not in VOID_ELEMENTS and tag != "html" and self.current.tag == tag:
            self.stack.pop()

    def handle_endtag(self, tag: str) -> None:
        if tag == "html":
            return
        for depth in range(len(self.stack) - 1, 0, -1):
            if self.stack[depth].tag == tag:
                del self.stack[depth:]
                return

    def handle_data(self, data: str) -> None:
        node = self.current
        if node is self.document or node.tag in RAW_TEXT_ELEMENTS:
            return
        node.texts.append(data)


def _normalize(document: Node) -> Node:
    """Return an ``html`` root that contains a ``body``, as a browser would."""
    elements = [c for c in document.children]
    if len(elements) == 1 and elements[0].tag == "html":
        root = elements[0]
    else:
        root = Node("html")
        for child in elements:
            if child.tag == "html":  # content written before an explicit <html>
                root.attrs.update(child.attrs)
                for grandchild in child.children:
                    root.append(grandchild)
            else:
                root.append(child)
    if not any(c.tag == "body" for c in root.children):
        body = Node("body")
        kept = []
        for child in root.children:
            if child.tag in HEAD_ELEMENTS:
                kept.append(child)
            else:
                body.append(child)
        root.children = kept
        root.append(body)
    root.parent = None
    return root


def decode_html(document: bytes | str) -> str:
    if isinstance(document, str):
        return document
    if document.startswith(b"\xef\xbb\xbf"):
        document = document[3:]
    return document.decode("utf-8", errors="replace")


def parse_html(document: bytes | str) -> Node:
    """Parse *document* into a tree rooted at ``html``."""
    text = decode_html(document)
    builder = _TreeBuilder()
    try:
        builder.feed(text)
        builder.close()
    except Exception as exc:  # html.parser is lenient; this is defensive
        raise HtmlParseError(str(exc)) from exc
    if not builder.document.children:
        raise HtmlParseError("document contains no elements")
    return _normalize(builder.document)


def select(root: Node, selector: SelectorList | str) -> list[Node]:
    """All elements under *root* (inclusive) matching *selector*, in document order."""
    ast = parse_selector(selector) if isinstance(selector, str) else selector
    return [node for node in root.iter() if matches(ast, node.descriptor())]


def element_from_html(document: bytes | str, locator: str) -> ElementDescriptor:
    """Descriptor of the first element matching *locator*.

    Multiple matches emit an :class:`AmbiguityWarning`; no match raises
    :class:`NoMatch`.
    """
    ast = parse_selector(locator)
    found = select(parse_html(document), ast)
    if not found:
        raise NoMatch(f"no element matches {locator!r}")
    if len(found) > 1:
        warnings.warn(
            f"{len(found)} elements match {locator!r}; using the first",
            AmbiguityWarning,
            stacklevel=2,
        )
    return found[0].descriptor()
