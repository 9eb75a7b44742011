"""The formal article language: AST, parser, formatter and evaluator.

An article looks like::

    article g
    environ imports b;
    begin
    def d1 : c := 2;
    thm t1 : c*c = 4 by d1;

Newlines are ordinary whitespace except that the ``article`` line, the
``environ`` clause and the ``begin`` keyword must each end their line.
``--`` starts a comment that runs to the end of the line.
"""

from __future__ import annotations

import re
from array import array
from dataclasses import dataclass, field
from typing import Mapping, Union

from fwiki import kernels as K

NAME_RE = re.compile(r"[a-z][a-z0-9_]{0,63}")
MAX_NESTING = 256
KEYWORDS = frozenset(
    {"article", "environ", "imports", "begin", "def", "thm", "by", "evaluation"}
)
RELATIONS = ("=", "<", "<=")
_REL_TOKENS = {K.T_EQ: "=", K.T_LT: "<", K.T_LE: "<="}
_TOKEN_NAMES = {
    K.T_EOF: "end of input",
    K.T_IDENT: "identifier",
    K.T_INT: "integer",
    K.T_COLON: "':'",
    K.T_ASSIGN: "':='",
    K.T_SEMI: "';'",
    K.T_COMMA: "','",
    K.T_PLUS: "'+'",
    K.T_MINUS: "'-'",
    K.T_STAR: "'*'",
    K.T_LPAREN: "'('",
    K.T_RPAREN: "')'",
    K.T_EQ: "'='",
    K.T_LT: "'<'",
    K.T_LE: "'<='",
    K.T_ERROR: "invalid character",
}


def is_article_name(name: str) -> bool:
    return NAME_RE.fullmatch(name) is not None and name not in KEYWORDS


# --------------------------------------------------------------------------
# Errors


class ParseError(Exception):
    """Grammar violation at a source position."""

    kind = "ParseError"

    def __init__(self, line: int, column: int, message: str) -> None:
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column
        self.message = message


class NameMismatch(ParseError):
    kind = "NameMismatch"


class DuplicateLabel(ParseError):
    kind = "DuplicateLabel"


class DuplicateSymbol(ParseError):
    kind = "DuplicateSymbol"


class DuplicateImport(ParseError):
    kind = "DuplicateImport"


class SelfImport(ParseError):
    kind = "SelfImport"


class EvalError(Exception):
    pass


class UnboundIdentifier(EvalError):
    def __init__(self, name: str, span: Span) -> None:
        super().__init__(f"unbound identifier {name!r} at {span.line}:{span.column}")
        self.name = name
        self.span = span


class Overflow(EvalError):
    def __init__(self, span: Span) -> None:
        super().__init__(f"64-bit overflow at {span.line}:{span.column}")
        self.span = span


# --------------------------------------------------------------------------
# AST. Spans are excluded from equality so trees compare structurally.


@dataclass(frozen=True)
class Span:
    line: int
    column: int


_NO_SPAN = Span(0, 0)


@dataclass(frozen=True)
class IntLit:
    value: int
    span: Span = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class Ident:
    name: str
    span: Span = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str  # one of "+", "-", "*"
    left: Expr
    right: Expr
    span: Span = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class Paren:
    inner: Expr
    span: Span = field(default=_NO_SPAN, compare=False)


Expr = Union[IntLit, Ident, BinOp, Paren]


@dataclass(frozen=True)
class Ref:
    """Justification reference; ``article`` is None for a local label."""

    article: str | None
    label: str
    span: Span = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class Definition:
    label: str
    symbol: str
    body: Expr
    span: Span = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class Theorem:
    label: str
    lhs: Expr
    relation: str
    rhs: Expr
    refs: tuple[Ref, ...] = ()  # empty means "by evaluation"
    span: Span = field(default=_NO_SPAN, compare=False)

    @property
    def by_evaluation(self) -> bool:
        return not self.refs


Item = Union[Definition, Theorem]


@dataclass(frozen=True)
class EnvironDecl:
    imports: tuple[str, ...] = ()


@dataclass(frozen=True)
class Article:
    name: str
    environ: EnvironDecl
    items: tuple[Item, ...] = ()


# --------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, text: str, toks: array) -> None:
        self.text = text
        self.toks = toks
        self.i = 0

    # token accessors; records are 5 int64s wide
    def kind(self, k: int = 0) -> int:
        return self.toks[(self.i + k) * 5]

    def value(self, k: int = 0) -> str:
        base = (self.i + k) * 5
        return self.text[self.toks[base + 1] : self.toks[base + 2]]

    def span(self, k: int = 0) -> Span:
        base = (self.i + k) * 5
        return Span(self.toks[base + 3], self.toks[base + 4])

    def line(self, k: int = 0) -> int:
        return self.toks[(self.i + k) * 5 + 3]

    def error(self, message: str, cls: type[ParseError] = ParseError, k: int = 0) -> ParseError:
        if self.kind(k) == K.T_ERROR:
            ch = self.value(k)
            cls, message = ParseError, f"unexpected character {ch!r}"
        span = self.span(k)
        return cls(span.line, span.column, message)

    def describe(self) -> str:
        kind = self.kind()
        if kind == K.T_IDENT or kind == K.T_INT:
            return repr(self.value())
        return _TOKEN_NAMES[kind]

    def expect(self, kind: int, what: str) -> None:
        if self.kind() != kind:
            raise self.error(f"expected {what}, found {self.describe()}")
        self.i += 1

    def keyword(self, word: str) -> None:
        if self.kind() != K.T_IDENT or self.value() != word:
            raise self.error(f"expected {word!r}, found {self.describe()}")
        self.i += 1

    def at_keyword(self, word: str) -> bool:
        return self.kind() == K.T_IDENT and self.value() == word

    def name(self, what: str) -> tuple[str, Span]:
        if self.kind() != K.T_IDENT:
            raise self.error(f"expected {what}, found {self.describe()}")
        value = self.value()
        if value in KEYWORDS:
            raise self.error(f"keyword {value!r} cannot be used as {what}")
        span = self.span()
        self.i += 1
        return value, span

    def article_name(self, what: str) -> tuple[str, Span]:
        value, span = self.name(what)
        if len(value) > 64:
            raise ParseError(span.line, span.column, f"{what} {value!r} exceeds 64 characters")
        return value, span

    def end_of_line(self, after: str) -> None:
        """The previous token must be the last one on its line."""
        prev_line = self.toks[(self.i - 1) * 5 + 3]
        if self.kind() != K.T_EOF and self.line() == prev_line:
            raise self.error(f"expected end of line after {after}")

    # header -------------------------------------------------------------

    def header(self) -> tuple[str, EnvironDecl]:
        self.keyword("article")
        name, _ = self.article_name("article name")
        self.end_of_line("article name")
        self.keyword("environ")
        imports: list[str] = []
        if self.at_keyword("imports"):
            self.i += 1
            seen: set[str] = set()
            while True:
                imp, span = self.article_name("imported article name")
                if imp == name:
                    raise SelfImport(span.line, span.column, f"article {name!r} imports itself")
                if imp in seen:
                    raise DuplicateImport(span.line, span.column, f"duplicate import {imp!r}")
                seen.add(imp)
                imports.append(imp)
                if self.kind() != K.T_COMMA:
                    break
                self.i += 1
            self.expect(K.T_SEMI, "';' after imports")
        self.end_of_line("environ clause")
        self.keyword("begin")
        return name, EnvironDecl(tuple(imports))

    # items --------------------------------------------------------------

    def items(self) -> tuple[Item, ...]:
        self.end_of_line("'begin'")
        items: list[Item] = []
        labels: set[str] = set()
        symbols: set[str] = set()
        while self.kind() != K.T_EOF:
            start = self.span()
            if self.at_keyword("def"):
                self.i += 1
                label, lspan = self.name("label")
                self.expect(K.T_COLON, "':'")
                symbol, sspan = self.name("identifier")
                self.expect(K.T_ASSIGN, "':='")
                body = self.expr(0)
                self.expect(K.T_SEMI, "';'")
                if symbol in symbols:
                    raise DuplicateSymbol(
                        sspan.line, sspan.column, f"symbol {symbol!r} already defined in this article"
                    )
                symbols.add(symbol)
                item: Item = Definition(label, symbol, body, start)
            elif self.at_keyword("thm"):
                self.i += 1
                label, lspan = self.name("label")
                self.expect(K.T_COLON, "':'")
                lhs = self.expr(0)
                rel = _REL_TOKENS.get(self.kind())
                if rel is None:
                    raise self.error(f"expected relation '=', '<' or '<=', found {self.describe()}")
                self.i += 1
                rhs = self.expr(0)
                self.keyword("by")
                refs: list[Ref] = []
                if self.at_keyword("evaluation") and self.kind(1) == K.T_SEMI:
                    self.i += 1
                else:
                    while True:
                        refs.append(self.ref())
                        if self.kind() != K.T_COMMA:
                            break
                        self.i += 1
                self.expect(K.T_SEMI, "';'")
                item = Theorem(label, lhs, rel, rhs, tuple(refs), start)
            else:
                raise self.error(f"expected 'def' or 'thm', found {self.describe()}")
            if label in labels:
                raise DuplicateLabel(lspan.line, lspan.column, f"duplicate label {label!r}")
            labels.add(label)
            items.append(item)
        return tuple(items)

    def ref(self) -> Ref:
        first, span = self.name("reference")
        if self.kind() == K.T_COLON:
            self.i += 1
            label, _ = self.name("label")
            return Ref(first, label, span)
        return Ref(None, first, span)

    # expressions --------------------------------------------------------

    def expr(self, depth: int) -> Expr:
        left = self.term(depth)
        while self.kind() == K.T_PLUS or self.kind() == K.T_MINUS:
            op_span = self.span()
            op = "+" if self.kind() == K.T_PLUS else "-"
            self.i += 1
            left = BinOp(op, left, self.term(depth), op_span)
        return left

    def term(self, depth: int) -> Expr:
        left = self.factor(depth)
        while self.kind() == K.T_STAR:
            op_span = self.span()
            self.i += 1
            left = BinOp("*", left, self.factor(depth), op_span)
        return left

    def factor(self, depth: int) -> Expr:
        kind = self.kind()
        span = self.span()
        if kind == K.T_INT:
            return self.int_literal("", span)
        if kind == K.T_MINUS and self.kind(1) == K.T_INT:
            # "-" glued to the digits is a negative literal
            end = self.toks[self.i * 5 + 2]
            if self.toks[(self.i + 1) * 5 + 1] == end:
                self.i += 1
                return self.int_literal("-", span)
        if kind == K.T_IDENT:
            name, span = self.name("identifier")
            return Ident(name, span)
        if kind == K.T_LPAREN:
            if depth >= MAX_NESTING:
                raise self.error(f"parentheses nested deeper than {MAX_NESTING}")
            self.i += 1
            inner = self.expr(depth + 1)
            self.expect(K.T_RPAREN, "')'")
            return Paren(inner, span)
        raise self.error(f"expected expression, found {self.describe()}")

    def int_literal(self, sign: str, span: Span) -> IntLit:
        value = int(sign + self.value())
        if not K.INT64_MIN <= value <= K.INT64_MAX:
            raise ParseError(span.line, span.column, "integer literal outside 64-bit signed range")
        self.i += 1
        return IntLit(value, span)


def parse_article(source_text: str, expected_name: str) -> Article:
    """Parse a complete article, raising ParseError (or a subclass) on failure."""
    parser = _Parser(source_text, K.tokenize(source_text))
    name, environ = parser.header()
    if name != expected_name:
        raise NameMismatch(1, 1, f"article header names {name!r} but expected {expected_name!r}")
    return Article(name, environ, parser.items())


_REST_OF_LINE = re.compile(r"[ \t\r]*(?:--[^\n]*)?(?:\n|\Z)")


def scan_header(source_text: str) -> tuple[str, EnvironDecl]:
    """Read only the header (through ``begin``) and return name and environ.

    Tokenization stops at ``begin``, so cost tracks the header length.
    """
    toks = K.tokenize(source_text, stop_at_begin=True)
    parser = _Parser(source_text, toks)
    name, environ = parser.header()
    # Only the remainder of the begin line is inspected, never the body.
    end = toks[(parser.i - 1) * 5 + 2]
    if _REST_OF_LINE.match(source_text, end) is None:
        line, col = toks[(parser.i - 1) * 5 + 3], toks[(parser.i - 1) * 5 + 4]
        raise ParseError(line, col + 5, "expected end of line after 'begin'")
    return name, environ


def parse_environ(source_text: str) -> EnvironDecl:
    return scan_header(source_text)[1]


# --------------------------------------------------------------------------
# Canonical formatter


def _postorder(expr: Expr):
    """Yield nodes in post-order without recursion (chains can be long)."""
    stack: list[tuple[Expr, bool]] = [(expr, False)]
    while stack:
        node, done = stack.pop()
        if done or isinstance(node, (IntLit, Ident)):
            yield node
        elif isinstance(node, BinOp):
            stack.append((node, True))
            stack.append((node.right, False))
            stack.append((node.left, False))
        else:
            stack.append((node, True))
            stack.append((node.inner, False))


def format_expr(expr: Expr) -> str:
    parts: list[str] = []
    for node in _postorder(expr):
        if isinstance(node, IntLit):
            parts.append(str(node.value))
        elif isinstance(node, Ident):
            parts.append(node.name)
        elif isinstance(node, BinOp):
            right = parts.pop()
            left = parts.pop()
            parts.append(f"{left} {node.op} {right}")
        else:
            parts.append(f"({parts.pop()})")
    return parts[0]


def format_statement(thm: Theorem) -> str:
    return f"{format_expr(thm.lhs)} {thm.relation} {format_expr(thm.rhs)}"


def format_item(item: Item) -> str:
    if isinstance(item, Definition):
        return f"def {item.label} : {item.symbol} := {format_expr(item.body)};"
    if item.refs:
        refs = ", ".join(r.label if r.article is None else f"{r.article}:{r.label}" for r in item.refs)
    else:
        refs = "evaluation"
    return f"thm {item.label} : {format_statement(item)} by {refs};"


def format_article(article: Article) -> str:
    lines = [f"article {article.name}"]
    imports = article.environ.imports
    lines.append(f"environ imports {', '.join(imports)};" if imports else "environ")
    lines.append("begin")
    lines.extend(format_item(item) for item in article.items)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Evaluation


def identifiers(expr: Expr) -> list[Ident]:
    """Identifier nodes of ``expr`` in source order."""
    return [node for node in _postorder(expr) if isinstance(node, Ident)]


def compile_expr(expr: Expr, slots: Mapping[str, int]) -> tuple[array, list[Span]]:
    """Lower ``expr`` to the kernel's postfix form.

    Returns the flat ``(op, arg)`` code and the span of each instruction so an
    overflow can be reported at its operator.
    """
    code: list[int] = []
    spans: list[Span] = []
    ops = {"+": K.OP_ADD, "-": K.OP_SUB, "*": K.OP_MUL}
    for node in _postorder(expr):
        if isinstance(node, IntLit):
            code += (K.OP_CONST, node.value)
        elif isinstance(node, Ident):
            code += (K.OP_VAR, slots[node.name])
        elif isinstance(node, BinOp):
            code += (ops[node.op], 0)
        else:
            continue
        spans.append(node.span)
    return array("q", code), spans


def evaluate_expr(expr: Expr, bindings: Mapping[str, int]) -> int:
    """Evaluate with checked 64-bit arithmetic.

    Raises UnboundIdentifier for the first identifier missing from
    ``bindings`` and Overflow at the first operator leaving the int64 range.
    """
    slots: dict[str, int] = {}
    values: list[int] = []
    for ident in identifiers(expr):
        if ident.name in slots:
            continue
        if ident.name not in bindings:
            raise UnboundIdentifier(ident.name, ident.span)
        slots[ident.name] = len(values)
        values.append(bindings[ident.name])
    code, spans = compile_expr(expr, slots)
    ok, result = K.eval_postfix(code, array("q", values))
    if not ok:
        raise Overflow(spans[result])
    return result


def holds(left: int, relation: str, right: int) -> bool:
    if relation == "=":
        return left == right
    if relation == "<":
        return left < right
    return left <= right
