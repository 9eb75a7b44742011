"""Pure-Python implementations of the hot kernels.

These mirror ``_speedups.pyx`` exactly: same token encoding, same postfix
opcodes, same return conventions. ``fwiki.kernels`` picks one at import.
"""

from __future__ import annotations

import re
from array import array

# Token kinds. Keep in sync with _speedups.pyx.
T_EOF = 0
T_IDENT = 1
T_INT = 2
T_COLON = 3
T_ASSIGN = 4
T_SEMI = 5
T_COMMA = 6
T_PLUS = 7
T_MINUS = 8
T_STAR = 9
T_LPAREN = 10
T_RPAREN = 11
T_EQ = 12
T_LT = 13
T_LE = 14
T_ERROR = 15

# Postfix opcodes.
OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1

_PUNCT = {
    ":=": T_ASSIGN,
    "<=": T_LE,
    ":": T_COLON,
    ";": T_SEMI,
    ",": T_COMMA,
    "+": T_PLUS,
    "-": T_MINUS,
    "*": T_STAR,
    "(": T_LPAREN,
    ")": T_RPAREN,
    "=": T_EQ,
    "<": T_LT,
}

# Group order matters: lastgroup tells us what matched.
_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r]+)"
    r"|(?P<nl>\n)"
    r"|(?P<comment>--[^\n]*)"
    r"|(?P<ident>[a-z][a-z0-9_]*)"
    r"|(?P<int>[0-9]+)"
    r"|(?P<punct>:=|<=|[:;,+\-*()=<])"
)


def tokenize(text: str, stop_at_begin: bool = False) -> array:
    """Flat int64 array of ``(kind, start, end, line, col)`` records.

    Always terminated by a ``T_EOF`` or ``T_ERROR`` record. With
    ``stop_at_begin`` the scan ends right after the first ``begin`` word.
    """
    out: list[int] = []
    pos = 0
    n = len(text)
    line = 1
    line_start = 0
    match = _TOKEN_RE.match
    while pos < n:
        m = match(text, pos)
        if m is None:
            out += (T_ERROR, pos, pos + 1, line, pos - line_start + 1)
            return array("q", out)
        group = m.lastgroup
        end = m.end()
        if group == "nl":
            line += 1
            line_start = end
        elif group == "ident":
            out += (T_IDENT, pos, end, line, pos - line_start + 1)
            if stop_at_begin and end - pos == 5 and text[pos:end] == "begin":
                out += (T_EOF, end, end, line, end - line_start + 1)
                return array("q", out)
        elif group == "int":
            out += (T_INT, pos, end, line, pos - line_start + 1)
        elif group == "punct":
            out += (_PUNCT[m.group()], pos, end, line, pos - line_start + 1)
        pos = end
    out += (T_EOF, n, n, line, n - line_start + 1)
    return array("q", out)


def eval_postfix(code: array, values: array) -> tuple[bool, int]:
    """Run a postfix program with checked 64-bit arithmetic.

    ``code`` is a flat ``(op, arg)`` sequence. Returns ``(True, result)`` or
    ``(False, op_index)`` where ``op_index`` is the instruction that
    overflowed.
    """
    stack: list[int] = []
    push = stack.append
    pop = stack.pop
    for i in range(0, len(code), 2):
        op = code[i]
        if op == OP_CONST:
            push(code[i + 1])
            continue
        if op == OP_VAR:
            push(values[code[i + 1]])
            continue
        right = pop()
        left = pop()
        if op == OP_ADD:
            r = left + right
        elif op == OP_SUB:
            r = left - right
        else:
            r = left * right
        if r < INT64_MIN or r > INT64_MAX:
            return False, i // 2
        push(r)
    return True, stack[-1]
