"""Patch evaluation: sentence BLEU-4, exact match and a delimiter-level syntax filter."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from . import codetok
from .codetok import Token

_OPEN = {"(": ")", "[": "]", "{": "}"}
_CLOSE = {v: k for k, v in _OPEN.items()}


def _texts(tokens) -> list[str]:
    if isinstance(tokens, str):
        return codetok.token_texts(tokens)
    return [str(t) for t in tokens]


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped_precisions(cand: Sequence[str], ref: Sequence[str], max_n: int = 4) -> list[tuple[int, int]]:
    out = []
    for n in range(1, max_n + 1):
        c = _ngram_counts(cand, n)
        r = _ngram_counts(ref, n)
        matched = sum(min(k, r[g]) for g, k in c.items())
        out.append((matched, max(len(cand) - n + 1, 0)))
    return out


def _bleu_from_counts(stats: list[tuple[int, int]], cand_len: int, ref_len: int) -> float:
    if cand_len == 0 or stats[0][0] == 0:
        return 0.0
    log_p = 0.0
    for n, (num, den) in enumerate(stats, start=1):
        if n >= 2 and num == 0:
            num, den = 1, den + 1
        log_p += math.log(num / den)
    bp = math.exp(1.0 - ref_len / cand_len) if cand_len < ref_len else 1.0
    return bp * math.exp(log_p / len(stats))


def bleu4(candidate, reference) -> float:
    """Smoothed sentence BLEU-4 over token sequences (or code strings, which are lexed).

    Zero higher-order matches get add-one smoothing; a candidate with no
    unigram match scores 0.
    """
    cand, ref = _texts(candidate), _texts(reference)
    return _bleu_from_counts(_clipped_precisions(cand, ref), len(cand), len(ref))


def corpus_bleu4(candidates, references) -> float:
    """Corpus BLEU-4 with n-gram counts pooled across all pairs (same smoothing rule)."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    pooled = [[0, 0] for _ in range(4)]
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = _texts(cand), _texts(ref)
        c_len += len(cand)
        r_len += len(ref)
        for slot, (num, den) in zip(pooled, _clipped_precisions(cand, ref)):
            slot[0] += num
            slot[1] += den
    return _bleu_from_counts([tuple(s) for s in pooled], c_len, r_len)


def exact_match(candidates, references) -> tuple[int, float]:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        return 0, 0.0
    n = sum(_texts(c) == _texts(r) for c, r in zip(candidates, references))
    return n, n / len(candidates)


# ---------------------------------------------------------------------------
# syntax filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterReason:
    kind: str  # unbalanced_delimiter | unterminated_literal | empty_output
    position: int | None = None
    delimiter: str | None = None

    def describe(self) -> str:
        if self.kind == "empty_output":
            return "empty output"
        if self.kind == "unterminated_literal":
            return f"unterminated literal at token {self.position}"
        return f"unbalanced {self.delimiter!r} at token {self.position}"


@dataclass(frozen=True)
class FilterVerdict:
    reasons: tuple[FilterReason, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.reasons

    def to_dict(self) -> dict:
        return {"pass": self.passed, "reasons": [asdict(r) for r in self.reasons]}


def _is_unterminated(tok) -> bool:
    if isinstance(tok, Token):
        return tok.kind == "error"
    text = str(tok)
    if not text or text[0] not in "\"'":
        return False
    try:
        lexed = codetok.tokenize(text)
    except codetok.LexError:
        return True
    return len(lexed) != 1


def syntax_filter(tokens) -> FilterVerdict:
    """Lexical plausibility check: non-empty, balanced delimiters, no broken literals.

    Accepts a code string, Token objects or plain token texts. Reasons are
    ordered by token position.
    """
    if isinstance(tokens, str):
        tokens = codetok.tokenize(tokens, strict=False)
    tokens = list(tokens)
    if not tokens:
        return FilterVerdict((FilterReason("empty_output"),))
    reasons: list[FilterReason] = []
    stack: list[tuple[str, int]] = []
    for pos, tok in enumerate(tokens):
        if _is_unterminated(tok):
            reasons.append(FilterReason("unterminated_literal", pos))
            continue
        text = str(tok)
        if text in _OPEN:
            stack.append((text, pos))
        elif text in _CLOSE:
            if stack and stack[-1][0] == _CLOSE[text]:
                stack.pop()
            else:
                reasons.append(FilterReason("unbalanced_delimiter", pos, text))
    reasons.extend(FilterReason("unbalanced_delimiter", pos, text) for text, pos in stack)
    reasons.sort(key=lambda r: r.position)
    return FilterVerdict(tuple(reasons))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class PairRecord:
    id: str
    buggy: str
    candidate: list[str]
    reference: list[str]
    bleu4: float
    exact: bool
    filter: FilterVerdict

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "buggy": self.buggy,
            "candidate": self.candidate,
            "reference": self.reference,
            "bleu4": self.bleu4,
            "exact": self.exact,
            "filter_verdict": self.filter.to_dict(),
        }


@dataclass
class EvalReport:
    n_pairs: int
    bleu4_mean: float
    exact_match_rate: float
    n_exact: int
    filter_pass_rate: float
    corpus_bleu4: float
    records: list[PairRecord] = field(default_factory=list)
    filtered: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "n_pairs": self.n_pairs,
            "bleu4_mean": self.bleu4_mean,
            "exact_match_rate": self.exact_match_rate,
            "n_exact": self.n_exact,
            "filter_pass_rate": self.filter_pass_rate,
            "corpus_bleu4": self.corpus_bleu4,
            "records": [r.to_dict() for r in self.records],
        }
        if self.filtered is not None:
            d["filtered"] = self.filtered
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, width: int = 40) -> str:
        """Plain-text table: buggy / human fix / generated fix / notes."""

        def cut(s: str) -> str:
            return s if len(s) <= width else s[: width - 3] + "..."

        head = f"{'buggy':<{width}} | {'human fix':<{width}} | {'generated fix':<{width}} | notes"
        lines = [head, "-" * len(head)]
        for r in self.records:
            notes = []
            notes.append("identical fix" if r.exact else f"bleu4={r.bleu4:.3f}")
            if not r.filter.passed:
                notes.append("; ".join(x.describe() for x in r.filter.reasons))
            lines.append(
                f"{cut(r.buggy):<{width}} | {cut(codetok.detokenize(r.reference)):<{width}} | "
                f"{cut(codetok.detokenize(r.candidate)):<{width}} | {', '.join(notes)}"
            )
        lines.append("")
        lines.append(
            f"pairs={self.n_pairs} bleu4_mean={self.bleu4_mean:.4f} exact={self.n_exact} "
            f"({self.exact_match_rate:.1%}) filter_pass={self.filter_pass_rate:.1%}"
        )
        return "\n".join(lines)


def summarize(records: list[PairRecord], with_filtered: bool = False) -> EvalReport:
    n = len(records)
    if n == 0:
        raise ValueError("evaluation set is empty")
    n_exact = sum(r.exact for r in records)
    report = EvalReport(
        n_pairs=n,
        bleu4_mean=math.fsum(r.bleu4 for r in records) / n,
        exact_match_rate=n_exact / n,
        n_exact=n_exact,
        filter_pass_rate=sum(r.filter.passed for r in records) / n,
        corpus_bleu4=corpus_bleu4([r.candidate for r in records], [r.reference for r in records]),
        records=records,
    )
    if with_filtered:
        kept = [r for r in records if r.filter.passed]
        k = len(kept)
        report.filtered = {
            "n_pass": k,
            "bleu4_mean": math.fsum(r.bleu4 for r in kept) / k if k else 0.0,
            "n_exact": sum(r.exact for r in kept),
            "exact_match_rate": sum(r.exact for r in kept) / k if k else 0.0,
        }
    return report


def evaluate(params, cfg, pairs, vocab, beam_width: int | None = None, max_len: int | None = None, max_src_len: int = 100, with_filtered: bool = False) -> EvalReport:
    """Decode every buggy line (greedy unless ``beam_width`` is given) and score it."""
    from . import generator

    if not pairs:
        raise ValueError("evaluation set is empty")
    records = []
    for pair in pairs:
        src = codetok.encode(codetok.tokenize(pair.buggy, strict=False), vocab, max_src_len)
        if beam_width is None:
            result = generator.greedy_decode(src, params, cfg, max_len=max_len)
        else:
            result = generator.beam_decode(src, params, cfg, beam_width=beam_width, max_len=max_len)[0]
        cand = codetok.decode(result.token_ids, vocab)
        ref = [t.text for t in codetok.tokenize(pair.fixed, strict=False)]
        records.append(
            PairRecord(pair.id, pair.buggy, cand, ref, bleu4(cand, ref), cand == ref, syntax_filter(cand))
        )
    return summarize(records, with_filtered)


EVAL_REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["n_pairs", "bleu4_mean", "exact_match_rate", "n_exact", "filter_pass_rate", "records"],
    "properties": {
        "n_pairs": {"type": "integer", "minimum": 1},
        "bleu4_mean": {"type": "number", "minimum": 0, "maximum": 1},
        "exact_match_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "n_exact": {"type": "integer", "minimum": 0},
        "filter_pass_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "corpus_bleu4": {"type": "number", "minimum": 0, "maximum": 1},
        "filtered": {
            "type": "object",
            "required": ["n_pass", "bleu4_mean", "n_exact", "exact_match_rate"],
        },
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "candidate", "reference", "bleu4", "exact", "filter_verdict"],
                "properties": {
                    "id": {"type": "string"},
                    "buggy": {"type": "string"},
                    "candidate": {"type": "array", "items": {"type": "string"}},
                    "reference": {"type": "array", "items": {"type": "string"}},
                    "bleu4": {"type": "number", "minimum": 0, "maximum": 1},
                    "exact": {"type": "boolean"},
                    "filter_verdict": {
                        "type": "object",
                        "required": ["pass", "reasons"],
                        "properties": {
                            "pass": {"type": "boolean"},
                            "reasons": {"type": "array"},
                        },
                    },
                },
            },
        },
    },
}
