# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tokenizer and postfix evaluator.

Drop-in replacements for the functions in ``fwiki._purepy``.
"""

from array import array

from libc.stdint cimport int64_t
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memcpy
from cpython cimport array as carray

cdef extern from *:
    """
    static int fw_add(long long a, long long b, long long *r) { return __builtin_saddll_overflow(a, b, r); }
    static int fw_sub(long long a, long long b, long long *r) { return __builtin_ssubll_overflow(a, b, r); }
    static int fw_mul(long long a, long long b, long long *r) { return __builtin_smulll_overflow(a, b, r); }
    """
    int fw_add(long long a, long long b, long long *r) nogil
    int fw_sub(long long a, long long b, long long *r) nogil
    int fw_mul(long long a, long long b, long long *r) nogil

cdef enum:
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

cdef enum:
    OP_CONST = 0
    OP_VAR = 1
    OP_ADD = 2
    OP_SUB = 3
    OP_MUL = 4


cdef struct TokBuf:
    int64_t *data
    Py_ssize_t size
    Py_ssize_t cap


cdef int _emit(TokBuf *buf, int64_t kind, int64_t start, int64_t end,
               int64_t line, int64_t col) except -1:
    cdef int64_t *grown
    if buf.size + 5 > buf.cap:
        buf.cap = buf.cap * 2 + 80
        grown = <int64_t *> realloc(buf.data, buf.cap * sizeof(int64_t))
        if grown == NULL:
            raise MemoryError()
        buf.data = grown
    buf.data[buf.size] = kind
    buf.data[buf.size + 1] = start
    buf.data[buf.size + 2] = end
    buf.data[buf.size + 3] = line
    buf.data[buf.size + 4] = col
    buf.size += 5
    return 0


cdef inline bint _is_ident_start(Py_UCS4 c):
    return c >= u'a' and c <= u'z'


cdef inline bint _is_ident_char(Py_UCS4 c):
    return (c >= u'a' and c <= u'z') or (c >= u'0' and c <= u'9') or c == u'_'


cdef inline bint _is_digit(Py_UCS4 c):
    return c >= u'0' and c <= u'9'


def tokenize(str text, bint stop_at_begin=False):
    cdef Py_ssize_t n = len(text)
    cdef Py_ssize_t pos = 0, start
    cdef int64_t line = 1
    cdef Py_ssize_t line_start = 0
    cdef Py_UCS4 c, d
    cdef int64_t kind
    cdef TokBuf buf
    cdef carray.array result
    buf.data = NULL
    buf.size = 0
    buf.cap = 0
    try:
        while pos < n:
            c = text[pos]
            if c == u' ' or c == u'\t' or c == u'\r':
                pos += 1
                continue
            if c == u'\n':
                pos += 1
                line += 1
                line_start = pos
                continue
            start = pos
            if _is_ident_start(c):
                pos += 1
                while pos < n and _is_ident_char(text[pos]):
                    pos += 1
                _emit(&buf, T_IDENT, start, pos, line, start - line_start + 1)
                if stop_at_begin and pos - start == 5 and text[start:pos] == u"begin":
                    _emit(&buf, T_EOF, pos, pos, line, pos - line_start + 1)
                    break
                continue
            if _is_digit(c):
                pos += 1
                while pos < n and _is_digit(text[pos]):
                    pos += 1
                _emit(&buf, T_INT, start, pos, line, start - line_start + 1)
                continue
            d = text[pos + 1] if pos + 1 < n else 0
            if c == u'-' and d == u'-':
                while pos < n and text[pos] != u'\n':
                    pos += 1
                continue
            if c == u':' and d == u'=':
                kind = T_ASSIGN
                pos += 2
            elif c == u'<' and d == u'=':
                kind = T_LE
                pos += 2
            else:
                pos += 1
                if c == u':':
                    kind = T_COLON
                elif c == u';':
                    kind = T_SEMI
                elif c == u',':
                    kind = T_COMMA
                elif c == u'+':
                    kind = T_PLUS
                elif c == u'-':
                    kind = T_MINUS
                elif c == u'*':
                    kind = T_STAR
                elif c == u'(':
                    kind = T_LPAREN
                elif c == u')':
                    kind = T_RPAREN
                elif c == u'=':
                    kind = T_EQ
                elif c == u'<':
                    kind = T_LT
                else:
                    _emit(&buf, T_ERROR, start, start + 1, line, start - line_start + 1)
                    break
            _emit(&buf, kind, start, pos, line, start - line_start + 1)
        else:
            _emit(&buf, T_EOF, n, n, line, n - line_start + 1)
        result = array("q")
        carray.resize(result, buf.size)
        if buf.size:
            memcpy(result.data.as_voidptr, buf.data, buf.size * sizeof(int64_t))
        return result
    finally:
        free(buf.data)


def eval_postfix(const long long[:] code, const long long[:] values):
    cdef Py_ssize_t ncode = code.shape[0]
    cdef Py_ssize_t i, sp = 0
    cdef long long op, left, right, r
    cdef long long *stack = <long long *> malloc((ncode // 2 + 1) * sizeof(long long))
    cdef bint ok = True
    cdef Py_ssize_t fail_at = 0
    if stack == NULL:
        raise MemoryError()
    try:
        with nogil:
            i = 0
            while i < ncode:
                op = code[i]
                if op == OP_CONST:
                    stack[sp] = code[i + 1]
                    sp += 1
                elif op == OP_VAR:
                    stack[sp] = values[code[i + 1]]
                    sp += 1
                else:
                    right = stack[sp - 1]
                    left = stack[sp - 2]
                    sp -= 1
                    if op == OP_ADD:
                        ok = not fw_add(left, right, &r)
                    elif op == OP_SUB:
                        ok = not fw_sub(left, right, &r)
                    else:
                        ok = not fw_mul(left, right, &r)
                    if not ok:
                        fail_at = i // 2
                        break
                    stack[sp - 1] = r
                i += 2
        if not ok:
            return False, fail_at
        return True, stack[sp - 1]
    finally:
        free(stack)
