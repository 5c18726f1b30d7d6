"""Plain-text token stream files.

Line 1 is ``C N v0 v1 ... v{C-1}``; each of the next ``N`` lines holds the
``C`` token ids of one time step, space separated.
"""
from __future__ import annotations

import io
import os

import numpy as np

from .core import TokenStream
from .errors import DataFormatError, ShapeError


def format_stream(s: TokenStream) -> str:
    buf = io.StringIO()
    buf.write(" ".join(str(v) for v in (s.channels, s.length, *s.vocab_sizes)) + "\n")
    for row in s.tokens.tolist():
        buf.write(" ".join(map(str, row)) + "\n")
    return buf.getvalue()


def write_stream(path, s: TokenStream) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_stream(s))


def parse_stream(text: str, path=None) -> TokenStream:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataFormatError("empty token stream file", path, 1)
    try:
        head = [int(t) for t in lines[0].split()]
    except ValueError:
        raise DataFormatError("header must be integers 'C N v0 ... v{C-1}'", path, 1) from None
    if len(head) < 3 or head[0] < 1 or head[1] < 0 or len(head) != 2 + head[0]:
        raise DataFormatError("header must read 'C N v0 ... v{C-1}' with C >= 1", path, 1)
    n_ch, n = head[0], head[1]
    vocab = head[2:]
    if len(lines) - 1 != n:
        raise DataFormatError(f"header declares {n} steps, file has {len(lines) - 1}", path, len(lines))
    tokens = np.zeros((n, n_ch), dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        fields = line.split()
        if len(fields) != n_ch:
            raise DataFormatError(f"expected {n_ch} token ids, found {len(fields)}", path, i + 2)
        try:
            row = [int(f) for f in fields]
        except ValueError:
            raise DataFormatError("token ids must be integers", path, i + 2) from None
        for c, t in enumerate(row):
            if not 0 <= t < vocab[c]:
                raise DataFormatError(f"token {t} outside vocabulary {vocab[c]} of channel {c}", path, i + 2)
        tokens[i] = row
    try:
        return TokenStream(tokens, vocab)
    except ShapeError as exc:
        raise DataFormatError(str(exc), path) from None


def read_stream(path) -> TokenStream:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read: {exc.strerror}", path) from None
    return parse_stream(text, os.fspath(path))
