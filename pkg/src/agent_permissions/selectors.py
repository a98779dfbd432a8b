"""CSS selector subset: parsing, matching and specificity.

Supported: type, universal, ``#id``, ``.class``, attribute predicates
(``[a]``, ``[a=v]``, ``[a^=v]``, ``[a$=v]``, ``[a*=v]``), the descendant and
child combinators, and comma grouping. Everything else is rejected with
:class:`UnsupportedFeature` so that rules never silently change meaning.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple

__all__ = [
    "AttributeSelector",
    "ComplexSelector",
    "CompoundSelector",
    "ElementDescriptor",
    "EmptySelector",
    "SelectorError",
    "SelectorList",
    "SelectorSyntaxError",
    "Specificity",
    "UnsupportedFeature",
    "matched_specificity",
    "matches",
    "parse_selector",
    "specificity",
]

WHITESPACE = " \t\n\r\f"
_ASCII_WS = re.compile(r"[ \t\n\r\f]+")
ATTR_OPS = ("=", "^=", "$=", "*=")


class SelectorError(ValueError):
    """Base class for selector parse failures."""

    def __init__(self, message: str, position: int | None = None) -> None:
        super().__init__(message)
        self.position = position


class EmptySelector(SelectorError):
    pass


class UnsupportedFeature(SelectorError):
    """The selector uses CSS outside the supported subset."""

    def __init__(self, token: str, position: int | None = None) -> None:
        super().__init__(f"unsupported selector feature {token!r}", position)
        self.token = token


class SelectorSyntaxError(SelectorError):
    pass


# --- AST ---------------------------------------------------------------------


class Specificity(NamedTuple):
    ids: int = 0
    classes: int = 0
    types: int = 0

    def __str__(self) -> str:
        return f"({self.ids},{self.classes},{self.types})"


@dataclass(frozen=True)
class AttributeSelector:
    name: str
    op: str | None = None  # None means "attribute exists"
    value: str | None = None

    def test(self, attributes: Mapping[str, str]) -> bool:
        actual = attributes.get(self.name)
        if actual is None:
            return False
        if self.op is None:
            return True
        value = self.value or ""
        if self.op == "=":
            return actual == value
        # CSS: an empty operand never matches the substring operators.
        if not value:
            return False
        if self.op == "^=":
            return actual.startswith(value)
        if self.op == "$=":
            return actual.endswith(value)
        return value in actual

    def __str__(self) -> str:
        if self.op is None:
            return f"[{escape_ident(self.name)}]"
        return f"[{escape_ident(self.name)}{self.op}{quote_string(self.value or '')}]"


@dataclass(frozen=True)
class CompoundSelector:
    tag: str | None = None  # "*" for explicit universal
    id: str | None = None
    classes: tuple[str, ...] = ()
    attributes: tuple[AttributeSelector, ...] = ()

    def test(self, el: ElementDescriptor) -> bool:
        if self.tag is not None and self.tag != "*" and self.tag != el.tag:
            return False
        if self.id is not None and self.id != el.id:
            return False
        if not el.classes.issuperset(self.classes):
            return False
        return all(attr.test(el.attributes) for attr in self.attributes)

    @property
    def specificity(self) -> Specificity:
        types = 1 if self.tag not in (None, "*") else 0
        return Specificity(
            1 if self.id is not None else 0,
            len(self.classes) + len(self.attributes),
            types,
        )

    def __str__(self) -> str:
        parts = []
        if self.tag is not None:
            parts.append("*" if self.tag == "*" else escape_ident(self.tag))
        if self.id is not None:
            parts.append("#" + escape_ident(self.id))
        parts.extend("." + escape_ident(c) for c in self.classes)
        parts.extend(str(a) for a in self.attributes)
        return "".join(parts) or "*"


@dataclass(frozen=True)
class ComplexSelector:
    """Compounds joined by combinators; ``combinators[i]`` sits between
    ``compounds[i]`` and ``compounds[i + 1]`` and is ``" "`` or ``">"``."""

    compounds: tuple[CompoundSelector, ...]
    combinators: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.compounds:
            raise ValueError("a complex selector needs at least one compound")
        if len(self.combinators) != len(self.compounds) - 1:
            raise ValueError("combinator count must be one less than compound count")

    @property
    def specificity(self) -> Specificity:
        ids = classes = types = 0
        for compound in self.compounds:
            s = compound.specificity
            ids, classes, types = ids + s.ids, classes + s.classes, types + s.types
        return Specificity(ids, classes, types)

    def test(self, el: ElementDescriptor) -> bool:
        chain = (el, *el.ancestors)
        return self._test_at(len(self.compounds) - 1, chain, 0)

    def _test_at(self, i: int, chain: tuple[ElementDescriptor, ...], k: int) -> bool:
        if not self.compounds[i].test(chain[k]):
            return False
        if i == 0:
            return True
        if self.combinators[i - 1] == ">":
            return k + 1 < len(chain) and self._test_at(i - 1, chain, k + 1)
        return any(self._test_at(i - 1, chain, j) for j in range(k + 1, len(chain)))

    def __str__(self) -> str:
        out = [str(self.compounds[0])]
        for comb, compound in zip(self.combinators, self.compounds[1:]):
            out.append(" > " if comb == ">" else " ")
            out.append(str(compound))
        return "".join(out)


@dataclass(frozen=True)
class SelectorList:
    alternatives: tuple[ComplexSelector, ...]

    def __post_init__(self) -> None:
        if not self.alternatives:
            raise ValueError("a selector list needs at least one alternative")

    def __str__(self) -> str:
        return ", ".join(str(alt) for alt in self.alternatives)


# --- Element descriptors -------------------------------------------------------


@dataclass(frozen=True)
class ElementDescriptor:
    """Static snapshot of one DOM element.

    ``ancestors`` runs from the immediate parent (index 0) to the root. The
    ancestor entries themselves carry no ancestors.
    """

    tag: str
    id: str | None = None
    classes: frozenset[str] = frozenset()
    attributes: Mapping[str, str] = field(default_factory=dict)
    ancestors: tuple[ElementDescriptor, ...] = ()

    @classmethod
    def create(
        cls,
        tag: str,
        attributes: Mapping[str, str] | None = None,
        ancestors: Iterable[ElementDescriptor] = (),
    ) -> ElementDescriptor:
        """Build a descriptor whose ``id`` and ``classes`` derive from *attributes*."""
        attrs = {k.lower(): v for k, v in (attributes or {}).items()}
        return cls(
            tag=tag.lower(),
            id=attrs.get("id"),
            classes=frozenset(split_tokens(attrs.get("class", ""))),
            attributes=attrs,
            ancestors=tuple(a if not a.ancestors else a.detached() for a in ancestors),
        )

    def detached(self) -> ElementDescriptor:
        return ElementDescriptor(self.tag, self.id, self.classes, self.attributes)

    @property
    def parent(self) -> ElementDescriptor | None:
        return self.ancestors[0] if self.ancestors else None

    def summary(self) -> str:
        out = self.tag
        if self.id:
            out += "#" + self.id
        out += "".join("." + c for c in sorted(self.classes))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "tag": self.tag,
            "attributes": dict(self.attributes),
            "ancestors": [
                {"tag": a.tag, "attributes": dict(a.attributes)} for a in self.ancestors
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ElementDescriptor:
        """Inverse of :meth:`to_dict`. ``id`` and ``classes`` keys, when given,
        are folded into the attribute map so the invariants hold."""
        if not isinstance(data, Mapping) or not isinstance(data.get("tag"), str):
            raise ValueError("element description needs a string 'tag'")
        attrs = {str(k).lower(): str(v) for k, v in dict(data.get("attributes") or {}).items()}
        if data.get("id") is not None:
            attrs["id"] = str(data["id"])
        if data.get("classes"):
            merged = split_tokens(attrs.get("class", ""))
            merged += [c for c in data["classes"] if c not in merged]
            attrs["class"] = " ".join(merged)
        ancestors = [cls.from_dict(a) for a in data.get("ancestors") or ()]
        return cls.create(data["tag"], attrs, ancestors)


def split_tokens(value: str) -> list[str]:
    """Split on ASCII whitespace, as HTML does for ``class`` and ``rel``."""
    return [t for t in _ASCII_WS.split(value) if t]


# --- Public operations ------------------------------------------------------------


def matches(selector: SelectorList, el: ElementDescriptor) -> bool:
    return any(alt.test(el) for alt in selector.alternatives)


def specificity(selector: SelectorList) -> Specificity:
    """Highest specificity among the alternatives."""
    return max(alt.specificity for alt in selector.alternatives)


def matched_specificity(selector: SelectorList, el: ElementDescriptor) -> Specificity | None:
    """Specificity of the most specific alternative matching *el*, or None."""
    found = [alt.specificity for alt in selector.alternatives if alt.test(el)]
    return max(found) if found else None


def parse_selector(raw: str) -> SelectorList:
    if not raw or not raw.strip(WHITESPACE):
        raise EmptySelector("empty selector", 0)
    return _Parser(raw).parse()


# --- Parser ---------------------------------------------------------------------

_HEX = "0123456789abcdefABCDEF"


def _is_name_start(ch: str) -> bool:
    return ch.isalpha() and ch.isascii() or ch == "_" or (ch != "" and ord(ch) > 127)


def _is_name_char(ch: str) -> bool:
    return _is_name_start(ch) or ch == "-" or (ch.isdigit() and ch.isascii())


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def peek(self, offset: int = 0) -> str:
        i = self.pos + offset
        return self.text[i] if i < len(self.text) else ""

    def skip_ws(self) -> bool:
        start = self.pos
        while self.peek() and self.peek() in WHITESPACE:
            self.pos += 1
        return self.pos > start

    def error(self, message: str) -> SelectorSyntaxError:
        return SelectorSyntaxError(f"{message} at position {self.pos} in {self.text!r}", self.pos)

    def parse(self) -> SelectorList:
        alternatives = [self.parse_complex()]
        while self.peek() == ",":
            self.pos += 1
            alternatives.append(self.parse_complex())
        if self.pos != len(self.text):
            raise self.error(f"unexpected {self.peek()!r}")
        return SelectorList(tuple(alternatives))

    def parse_complex(self) -> ComplexSelector:
        self.skip_ws()
        compounds = [self.parse_compound()]
        combinators: list[str] = []
        while True:
            had_ws = self.skip_ws()
            ch = self.peek()
            if ch in ("", ","):
                break
            if ch == ">":
                self.pos += 1
                self.skip_ws()
                combinators.append(">")
            elif ch in "+~":
                raise UnsupportedFeature(ch, self.pos)
            elif had_ws:
                combinators.append(" ")
            else:
                raise self.error(f"unexpected {ch!r}")
            compounds.append(self.parse_compound())
        return ComplexSelector(tuple(compounds), tuple(combinators))

    def parse_compound(self) -> CompoundSelector:
        start = self.pos
        tag: str | None = None
        ident: str | None = None
        classes: list[str] = []
        attributes: list[AttributeSelector] = []
        if self.peek() == "*":
            self.pos += 1
            tag = "*"
        elif self.at_ident():
            tag = self.read_ident().lower()
        if self.peek() == "|":
            raise UnsupportedFeature("|", self.pos)
        while True:
            ch = self.peek()
            if ch == "#":
                self.pos += 1
                if ident is not None:
                    raise self.error("more than one id in a compound selector")
                ident = self.expect_ident("id")
            elif ch == ".":
                self.pos += 1
                classes.append(self.expect_ident("class name"))
            elif ch == "[":
                attributes.append(self.parse_attribute())
            elif ch == ":":
                begin = self.pos
                self.pos += 1
                if self.peek() == ":":
                    self.pos += 1
                while _is_name_char(self.peek()):
                    self.pos += 1
                raise UnsupportedFeature(self.text[begin : self.pos], begin)
            elif ch in ("*",) or (ch and self.at_ident()):
                raise self.error("type selector must come first in a compound")
            else:
                break
        if self.pos == start:
            if self.peek() in ("+", "~"):
                raise UnsupportedFeature(self.peek(), self.pos)
            raise self.error("expected a selector" if self.peek() else "selector ends unexpectedly")
        return CompoundSelector(tag, ident, tuple(classes), tuple(attributes))

    def parse_attribute(self) -> AttributeSelector:
        self.pos += 1  # "["
        self.skip_ws()
        if self.peek() == "|" or (self.peek() == "*" and self.peek(1) == "|"):
            raise UnsupportedFeature("|", self.pos)
        name = self.expect_ident("attribute name").lower()
        if self.peek() == "|" and self.peek(1) != "=":
            raise UnsupportedFeature("|", self.pos)
        self.skip_ws()
        if self.peek() == "]":
            self.pos += 1
            return AttributeSelector(name)
        op_start = self.pos
        if self.peek() == "=":
            op = "="
            self.pos += 1
        elif self.peek(1) == "=" and self.peek() in "^$*~|":
            op = self.text[self.pos : self.pos + 2]
            if op not in ATTR_OPS:
                raise UnsupportedFeature(op, op_start)
            self.pos += 2
        else:
            raise self.error("expected attribute operator or ']'")
        self.skip_ws()
        if self.peek() in ("'", '"'):
            value = self.read_string()
        elif self.at_ident() or _is_name_char(self.peek()):
            value = self.read_ident(unquoted_value=True)
        else:
            raise self.error("expected attribute value")
        self.skip_ws()
        if self.peek() != "]":
            if self.at_ident():
                flag_pos = self.pos
                flag = self.read_ident()
                raise UnsupportedFeature(f"attribute flag {flag}", flag_pos)
            raise self.error("expected ']'")
        self.pos += 1
        return AttributeSelector(name, op, value)

    def at_ident(self) -> bool:
        ch0, ch1 = self.peek(), self.peek(1)
        if ch0 == "-":
            return _is_name_start(ch1) or ch1 == "-" or ch1 == "\\"
        return _is_name_start(ch0) or ch0 == "\\"

    def expect_ident(self, what: str) -> str:
        if not self.at_ident():
            raise self.error(f"expected {what}")
        return self.read_ident()

    def read_ident(self, unquoted_value: bool = False) -> str:
        out = []
        while True:
            ch = self.peek()
            if ch == "\\":
                out.append(self.read_escape())
            elif _is_name_char(ch):
                out.append(ch)
                self.pos += 1
            else:
                break
        if not out and not unquoted_value:
            raise self.error("expected identifier")
        return "".join(out)

    def read_escape(self) -> str:
        self.pos += 1  # backslash
        ch = self.peek()
        if not ch or ch in "\n\r\f":
            raise self.error("invalid escape")
        if ch in _HEX:
            digits = ""
            while len(digits) < 6 and self.peek() and self.peek() in _HEX:
                digits += self.peek()
                self.pos += 1
            if self.peek() and self.peek() in WHITESPACE:
                self.pos += 1
            code = int(digits, 16)
            if code == 0 or code > 0x10FFFF or 0xD800 <= code <= 0xDFFF:
                return "�"
            return chr(code)
        self.pos += 1
        return ch

    def read_string(self) -> str:
        quote = self.peek()
        self.pos += 1
        out = []
        while True:
            ch = self.peek()
            if ch == "":
                raise self.error("unterminated string")
            if ch == quote:
                self.pos += 1
                return "".join(out)
            if ch == "\\":
                if self.peek(1) == "\n":
                    self.pos += 2
                    continue
                out.append(self.read_escape())
            elif ch == "\n":
                raise self.error("newline in string")
            else:
                out.append(ch)
                self.pos += 1


# --- Printing helpers -----------------------------------------------------------

_PLAIN_IDENT = re.compile(
    r"(?:--|-?[A-Za-z_\u0080-\U0010ffff])[A-Za-z0-9_\-\u0080-\U0010ffff]*\Z"
)


def escape_ident(value: str) -> str:
    """Serialize *value* as a CSS identifier, escaping where needed."""
    if _PLAIN_IDENT.match(value):
        return value
    if value == "-":
        return "\\-"
    out = []
    for i, ch in enumerate(value):
        leading_digit = ch.isdigit() and (i == 0 or (i == 1 and value[0] == "-"))
        if leading_digit or ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\{ord(ch):x} ")
        elif _is_name_char(ch):
            out.append(ch)
        else:
            out.append("\\" + ch)
    return "".join(out)


def quote_string(value: str) -> str:
    escaped = value.replace("\\", "\\\\").replace('"', '\\"')
    escaped = "".join(f"\\{ord(c):x} " if c in "\n\r\f" else c for c in escaped)
    return f'"{escaped}"'
