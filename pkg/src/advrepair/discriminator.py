"""Patch discriminator: probability that a (buggy, fix) pair carries a human fix.

The pair is read as one sequence ``buggy <sep> fix`` by a single LSTM whose
final state feeds a sigmoid unit. A fix is either hard token ids or a
``[T, V]`` matrix of token distributions; distributions enter through their
expected embedding so gradients reach whatever produced them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .codetok import SEP
from .generator import run_lstm
from .numcore import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class DiscriminatorConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.vocab_size < 6 or self.embed_dim < 1 or self.hidden_dim < 1:
            raise nc.ConfigError("discriminator dimensions must be >= 1 and cover the specials")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise nc.ConfigError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: DiscriminatorConfig) -> dict[str, tuple[int, ...]]:
    V, E, H = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
    return {
        "embedding": (V, E),
        "lstm.W": (E, 4 * H),
        "lstm.U": (H, 4 * H),
        "lstm.b": (4 * H,),
        "output.w": (H,),
        "output.b": (),
    }


def init_params(cfg: DiscriminatorConfig, rng: np.random.Generator, scale: float = 0.1) -> dict[str, Tensor]:
    params = {}
    H = cfg.hidden_dim
    for name, shape in param_shapes(cfg).items():
        if name in ("lstm.b", "output.b"):
            values = np.zeros(shape)
            if name == "lstm.b":
                values[H : 2 * H] = 1.0
        else:
            values = rng.uniform(-scale, scale, size=shape)
        params[name] = nc.parameter(values, name=name)
    return params


def zero_params(cfg: DiscriminatorConfig) -> dict[str, Tensor]:
    return {name: nc.parameter(np.zeros(shape), name=name) for name, shape in param_shapes(cfg).items()}


def _is_soft(rep) -> bool:
    if isinstance(rep, Tensor):
        return True
    arr = np.asarray(rep)
    return arr.ndim == 2 and arr.dtype.kind == "f"


def _check_distribution(values: np.ndarray) -> None:
    if values.ndim != 2:
        raise DimensionError(f"distribution fix must be [T, V], got {values.shape}")
    if values.shape[0] and np.abs(values.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("fix distribution rows must sum to 1 within 1e-6")


def _strip_pad(ids) -> np.ndarray:
    return np.trim_zeros(np.asarray(ids, dtype=np.int64).reshape(-1), "b")  # PAD == 0


def embed_fix(rep, params) -> Tensor:
    """``[T, E_d]`` embedding of a hard or soft fix."""
    emb = params["embedding"]
    if _is_soft(rep):
        dist = nc.as_tensor(rep)
        _check_distribution(dist.values)
        if dist.shape[1] != emb.shape[0]:
            raise DimensionError(f"distribution width {dist.shape[1]} != vocabulary {emb.shape[0]}")
        return nc.matmul(dist, emb)
    return nc.take_rows(emb, np.asarray(rep, dtype=np.int64).reshape(-1))


def score_batch(buggy, fixes, params, cfg: DiscriminatorConfig, training: bool = False, rng=None, fix_lengths=None) -> Tensor:
    """Human-fix probabilities ``[B]``.

    ``buggy`` is a list of id sequences. ``fixes`` is either a list of fix
    representations, or a ``[B, T, V]`` distribution tensor with per-row
    ``fix_lengths``.
    """
    B = len(buggy)
    bug = [_strip_pad(b) for b in buggy]
    if any(b.size == 0 for b in bug):
        raise ContractError("buggy sequence must be non-empty")
    emb = params["embedding"]

    batched_soft = isinstance(fixes, Tensor) and fixes.ndim == 3
    if batched_soft:
        if fix_lengths is None:
            fix_lengths = [fixes.shape[1]] * B
        lengths = [int(n) for n in fix_lengths]
        soft_rows = list(range(B))
        for r in range(B):
            _check_distribution(fixes.values[r, : lengths[r]])
    else:
        if len(fixes) != B:
            raise DimensionError(f"{B} buggy sequences but {len(fixes)} fixes")
        lengths = []
        soft_rows = []
        for r, rep in enumerate(fixes):
            if _is_soft(rep):
                soft_rows.append(r)
                vals = rep.values if isinstance(rep, Tensor) else np.asarray(rep)
                _check_distribution(vals)
                lengths.append(vals.shape[0])
            else:
                lengths.append(_strip_pad(rep).size)

    starts = [b.size + 1 for b in bug]
    total = [s + n for s, n in zip(starts, lengths)]
    L = max(total)
    ids = np.zeros((B, L), dtype=np.int64)
    hard_keep = np.zeros((B, L), dtype=bool)
    mask = np.zeros((B, L), dtype=bool)
    for r in range(B):
        ids[r, : bug[r].size] = bug[r]
        ids[r, bug[r].size] = SEP
        mask[r, : total[r]] = True
        if r not in soft_rows:
            ids[r, starts[r] : total[r]] = _strip_pad(fixes[r])
            hard_keep[r, : total[r]] = True
        else:
            hard_keep[r, : starts[r]] = True

    x = nc.take_rows(emb, ids)
    if soft_rows:
        if batched_soft:
            soft_emb = nc.matmul(fixes, emb)  # [B, T, E]
            T = fixes.shape[1]
            place = np.zeros((B, L, T))
            for r in range(B):
                n = lengths[r]
                place[r, starts[r] + np.arange(n), np.arange(n)] = 1.0
            placed = nc.matmul(Tensor(place), soft_emb)
        else:
            rows = []
            for r in range(B):
                place = np.zeros((L, max(lengths[r], 1)))
                if r in soft_rows and lengths[r]:
                    place[starts[r] + np.arange(lengths[r]), np.arange(lengths[r])] = 1.0
                    rows.append(nc.matmul(Tensor(place), embed_fix(fixes[r], params)))
                else:
                    rows.append(Tensor(np.zeros((L, emb.shape[1]))))
            placed = nc.stack(rows, axis=0)
        x = nc.mul(x, hard_keep[:, :, None].astype(float)) + placed

    _, h, _ = run_lstm(x, mask, params["lstm.W"], params["lstm.U"], params["lstm.b"])
    h = nc.dropout(h, cfg.dropout_rate, training, rng)
    logit = nc.matmul(h, params["output.w"]) + params["output.b"]
    return nc.sigmoid(logit)


def score_pair(buggy_ids, fix, params, cfg: DiscriminatorConfig, training: bool = False, rng=None) -> Tensor:
    return nc.reshape(score_batch([buggy_ids], [fix], params, cfg, training, rng), ())


def classify_batch(items, params, cfg: DiscriminatorConfig, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Score ``(buggy, fix, label)`` triples; return (probabilities, mean BCE)."""
    buggy = [b for b, _, _ in items]
    fixes = [f for _, f, _ in items]
    labels = np.array([lab for _, _, lab in items], dtype=float)
    probs = score_batch(buggy, fixes, params, cfg, training, rng)
    return probs, nc.bce(probs, labels)
