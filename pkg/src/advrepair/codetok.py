"""Code lexing and the token/id vocabulary shared by both networks."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, SOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<sos>", "<eos>", "<unk>", "<sep>")

# Java operators and separators, matched longest-first.
JAVA_OPERATORS = (
    ">>>=", "<<=", ">>=", ">>>", "...",
    "==", "!=", "<=", ">=", "&&", "||", "++", "--",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=",
    "<<", ">>", "->", "::",
    "=", "<", ">", "!", "~", "?", ":", "+", "-", "*", "/", "&", "|", "^", "%", "@",
)
PUNCTUATION = frozenset("()[]{};,.")

KINDS = ("identifier", "number", "string_literal", "char_literal", "operator", "punctuation", "other", "error")

_IDENT = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")
_NUMBER = re.compile(
    r"0[xX][0-9a-fA-F_]+[lL]?"
    r"|0[bB][01_]+[lL]?"
    r"|(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9][0-9_]*)(?:[eE][+-]?[0-9]+)?[fFdDlL]?"
)
_SPACE = re.compile(r"\s+")
_DIGITS = frozenset("0123456789")


class LexError(ValueError):
    def __init__(self, message: str, column: int):
        super().__init__(f"{message} at column {column}")
        self.column = column


@dataclass(frozen=True)
class Token:
    text: str
    kind: str

    def __str__(self) -> str:
        return self.text


def _skip_trivia(text: str, pos: int) -> int:
    n = len(text)
    while pos < n:
        m = _SPACE.match(text, pos)
        if m:
            pos = m.end()
            continue
        if text.startswith("//", pos):
            end = text.find("\n", pos)
            pos = n if end < 0 else end + 1
            continue
        if text.startswith("/*", pos):
            end = text.find("*/", pos + 2)
            pos = n if end < 0 else end + 2
            continue
        break
    return pos


def _scan_quoted(text: str, pos: int) -> int | None:
    """Return the index just past the closing quote, or None when unterminated."""
    quote = text[pos]
    i = pos + 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\":
            i += 2
            continue
        if ch == quote:
            return i + 1
        if ch == "\n":
            return None
        i += 1
    return None


def tokenize(text: str, operators: Sequence[str] = JAVA_OPERATORS, strict: bool = True) -> list[Token]:
    """Maximal-munch lexer.

    With ``strict=False`` an unterminated literal becomes a single ``error``
    token spanning the rest of the line instead of raising.
    """
    ops = sorted(operators, key=len, reverse=True)
    tokens: list[Token] = []
    pos = _skip_trivia(text, 0)
    n = len(text)
    while pos < n:
        ch = text[pos]
        if ch in "\"'":
            end = _scan_quoted(text, pos)
            if end is None:
                if strict:
                    raise LexError("unterminated literal", pos)
                stop = text.find("\n", pos)
                end = n if stop < 0 else stop
                tokens.append(Token(text[pos:end], "error"))
            else:
                kind = "string_literal" if ch == '"' else "char_literal"
                tokens.append(Token(text[pos:end], kind))
            pos = _skip_trivia(text, end)
            continue
        m = _IDENT.match(text, pos)
        if m:
            tokens.append(Token(m.group(), "identifier"))
            pos = _skip_trivia(text, m.end())
            continue
        if ch in _DIGITS or (ch == "." and pos + 1 < n and text[pos + 1] in _DIGITS):
            m = _NUMBER.match(text, pos)
            tokens.append(Token(m.group(), "number"))
            pos = _skip_trivia(text, m.end())
            continue
        for op in ops:
            if text.startswith(op, pos):
                kind = "punctuation" if op in PUNCTUATION else "operator"
                tokens.append(Token(op, kind))
                pos += len(op)
                break
        else:
            kind = "punctuation" if ch in PUNCTUATION else "other"
            tokens.append(Token(ch, kind))
            pos += 1
        pos = _skip_trivia(text, pos)
    return tokens


def detokenize(tokens: Iterable[Token | str]) -> str:
    return " ".join(str(t) for t in tokens)


def token_texts(text: str) -> list[str]:
    return [t.text for t in tokenize(text)]


@dataclass
class Vocabulary:
    """Dense token/id bijection; ids 0-4 are always the specials."""

    tokens: list[str]
    freqs: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens " + ", ".join(SPECIALS))
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def lookup(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"id {idx} out of range for vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(streams: Iterable[Iterable[Token | str]], min_freq: int = 1, max_size: int = 50_000) -> Vocabulary:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_size <= len(SPECIALS):
        raise ValueError(f"max_size must exceed {len(SPECIALS)}")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for stream in streams:
        for tok in stream:
            text = str(tok)
            counts[text] += 1
            first_seen.setdefault(text, len(first_seen))
    kept = [t for t in counts if counts[t] >= min_freq and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], first_seen[t]))
    kept = kept[: max_size - len(SPECIALS)]
    return Vocabulary(list(SPECIALS) + kept, {t: counts[t] for t in kept})


def encode(tokens: Iterable[Token | str], vocab: Vocabulary, max_len: int) -> list[int]:
    """SOS + ids of the first ``max_len`` tokens + EOS; unknown tokens map to UNK."""
    ids = [vocab.lookup(str(t)) for t in tokens][:max_len]
    return [SOS, *ids, EOS]


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    out = []
    for i in ids:
        i = int(i)
        tok = vocab.token_of(i)
        if i in (PAD, SOS, EOS):
            continue
        out.append(tok)
    return out
