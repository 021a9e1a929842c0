"""Buggy/fixed pair datasets: loading, cleaning, splitting, batching."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import codetok
from .codetok import PAD, Vocabulary
from .numcore import ConfigError


class LoadError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(LoadError):
    pass


@dataclass(frozen=True)
class CodePair:
    id: str
    buggy: str
    fixed: str


@dataclass
class DatasetSplit:
    train: list[CodePair]
    eval: list[CodePair]
    seed: int

    def manifest(self) -> dict:
        return {"seed": self.seed, "eval_ids": [p.id for p in self.eval]}


@dataclass
class Batch:
    src: np.ndarray  # [B, S_max] int64
    tgt: np.ndarray  # [B, T_max] int64
    src_len: np.ndarray
    tgt_len: np.ndarray
    pairs: list[CodePair]

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt != PAD

    def __len__(self) -> int:
        return self.src.shape[0]


def load_pairs(path) -> list[CodePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise LoadError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise SchemaError("record is not a JSON object", lineno)
            for key in ("buggy", "fixed"):
                if key not in rec:
                    raise SchemaError(f"missing field {key!r}", lineno)
                if not isinstance(rec[key], str) or not rec[key].strip():
                    raise SchemaError(f"field {key!r} must be a non-empty string", lineno)
            pid = rec.get("id", f"pair-{lineno}")
            if not isinstance(pid, str):
                raise SchemaError("field 'id' must be a string", lineno)
            pairs.append(CodePair(pid, rec["buggy"], rec["fixed"]))
    return pairs


def save_pairs(path, pairs: Iterable[CodePair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps({"id": p.id, "buggy": p.buggy, "fixed": p.fixed}, ensure_ascii=False) + "\n")


_WS = re.compile(r"\s+")


def _normalize(text: str) -> str:
    return _WS.sub(" ", text).strip()


def dedup(pairs: Sequence[CodePair]) -> list[CodePair]:
    """Drop later pairs whose whitespace-normalised (buggy, fixed) repeats an earlier one."""
    seen = set()
    out = []
    for p in pairs:
        key = (_normalize(p.buggy), _normalize(p.fixed))
        if key in seen:
            continue
        seen.add(key)
        out.append(p)
    return out


def filter_single_line(pairs: Sequence[CodePair]) -> list[CodePair]:
    return [p for p in pairs if "\n" not in p.fixed.strip()]


def split(pairs: Sequence[CodePair], eval_count: int, seed: int) -> DatasetSplit:
    if not 0 < eval_count < len(pairs):
        raise ConfigError(f"eval_count must be in (0, {len(pairs)}), got {eval_count}")
    order = np.random.Generator(np.random.Philox(seed)).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    cut = len(pairs) - eval_count
    return DatasetSplit(shuffled[:cut], shuffled[cut:], seed)


def prepare(pairs: Sequence[CodePair], eval_count: int, seed: int) -> tuple[DatasetSplit, dict]:
    """dedup -> single-line filter -> split, with per-stage counts."""
    deduped = dedup(pairs)
    single = filter_single_line(deduped)
    parts = split(single, eval_count, seed)
    stats = {
        "input": len(pairs),
        "after_dedup": len(deduped),
        "duplicates_removed": len(pairs) - len(deduped),
        "after_single_line": len(single),
        "multi_line_removed": len(deduped) - len(single),
        "train": len(parts.train),
        "eval": len(parts.eval),
    }
    return parts, stats


def encode_pair(pair: CodePair, vocab: Vocabulary, max_src: int, max_tgt: int) -> tuple[list[int], list[int]]:
    src = codetok.encode(codetok.tokenize(pair.buggy, strict=False), vocab, max_src)
    tgt = codetok.encode(codetok.tokenize(pair.fixed, strict=False), vocab, max_tgt)
    return src, tgt


def _pad(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batches(
    pairs: Sequence[CodePair],
    vocab: Vocabulary,
    batch_size: int,
    max_src: int = 100,
    max_tgt: int = 100,
    shuffle_seed: int | np.random.Generator | None = None,
) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(pairs))
    if shuffle_seed is not None:
        rng = shuffle_seed if isinstance(shuffle_seed, np.random.Generator) else np.random.Generator(np.random.Philox(shuffle_seed))
        order = rng.permutation(len(pairs))
    encoded = {i: encode_pair(pairs[i], vocab, max_src, max_tgt) for i in order}
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        srcs = [encoded[i][0] for i in idx]
        tgts = [encoded[i][1] for i in idx]
        batches.append(
            Batch(
                src=_pad(srcs),
                tgt=_pad(tgts),
                src_len=np.array([len(s) for s in srcs], dtype=np.int64),
                tgt_len=np.array([len(t) for t in tgts], dtype=np.int64),
                pairs=[pairs[i] for i in idx],
            )
        )
    return batches


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_OBJECTS = ("t", "conn", "stmt", "writer", "reader", "table", "ctx", "session", "client", "cache", "buffer", "job")
_SETTERS = ("setAutoFlush", "setEnabled", "setVisible", "setReadOnly", "setCacheable", "setLenient", "setDaemon", "setStrict")
_FUNCS = ("detectDeadlock", "clearWorkMap", "closeQuietly", "releaseLock", "validate", "flushAll", "registerHook", "logFailure")
_ARGS = ("e", "x", "key", "value", "path", "node", "id", "name")
_CONTEXTS = ("dbConn", "jconf", "conf", "this", "null", "context", "monitor", "env")
_RENAMES = (
    ("createProcessor", "createChildProcessor"),
    ("get", "getOrDefault"),
    ("remove", "removeQuietly"),
    ("put", "putIfAbsent"),
    ("close", "closeAll"),
    ("open", "openReadOnly"),
    ("start", "startAsync"),
    ("submit", "submitTask"),
)


def synth_corpus(n: int, seed: int) -> list[CodePair]:
    """Template pairs exercising literal flips, argument insertion and callee renames.

    Each function name has one fixed context argument, so the mapping from
    buggy to fixed text is a deterministic function of the buggy line.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    ctx_for = {fn: str(c) for fn, c in zip(_FUNCS, rng.permutation(_CONTEXTS))}

    def pick(pool):
        return pool[int(rng.integers(len(pool)))]

    out: list[CodePair] = []
    seen = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise ValueError(f"cannot draw {n} distinct synthetic pairs")
        kind = int(rng.integers(3))
        if kind == 0:
            obj, setter = pick(_OBJECTS), pick(_SETTERS)
            buggy = f"{obj}.{setter}(false);"
            fixed = f"{obj}.{setter}(true);"
        elif kind == 1:
            fn, arg = pick(_FUNCS), pick(_ARGS)
            buggy = f"{fn}({arg});"
            fixed = f"{fn}({ctx_for[fn]}, {arg});"
        else:
            obj, (old, new), arg = pick(_OBJECTS), pick(_RENAMES), pick(_ARGS)
            buggy = f"{obj}.{old}({arg});"
            fixed = f"{obj}.{new}({arg});"
        if (buggy, fixed) in seen:
            continue
        seen.add((buggy, fixed))
        out.append(CodePair(f"synth-{seed}-{len(out)}", buggy, fixed))
    return out
