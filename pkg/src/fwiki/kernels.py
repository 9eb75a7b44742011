"""Kernel selection.

The compiled ``_speedups`` extension is used when it imports; otherwise the
pure-Python twins in ``_purepy`` take over. Set ``FWIKI_PURE_PYTHON=1`` to
force the fallback (the benchmark and the parity tests do this).
"""

from __future__ import annotations

import os

from fwiki import _purepy
from fwiki._purepy import (  # noqa: F401  (re-exported constants)
    INT64_MAX,
    INT64_MIN,
    OP_ADD,
    OP_CONST,
    OP_MUL,
    OP_SUB,
    OP_VAR,
    T_ASSIGN,
    T_COLON,
    T_COMMA,
    T_EOF,
    T_EQ,
    T_ERROR,
    T_IDENT,
    T_INT,
    T_LE,
    T_LPAREN,
    T_LT,
    T_MINUS,
    T_PLUS,
    T_RPAREN,
    T_SEMI,
    T_STAR,
)

BACKEND = "python"
tokenize = _purepy.tokenize
eval_postfix = _purepy.eval_postfix

if os.environ.get("FWIKI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fwiki import _speedups
    except ImportError:  # extension not built
        pass
    else:
        tokenize = _speedups.tokenize
        eval_postfix = _speedups.eval_postfix
        BACKEND = "cython"
