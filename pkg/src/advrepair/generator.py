"""Patch generator: LSTM encoder-decoder with additive attention.

All sequence operations run batched, with shape ``[B, ...]``. Single-sequence
entry points (``greedy_decode``, ``beam_decode``) wrap the batched core.
Gate blocks in the fused LSTM matrices are ordered input, forget, output,
candidate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .codetok import EOS, PAD, SOS
from .numcore import ContractError, DimensionError, Tensor

# Never emitted by decoding.
_BANNED = (PAD, SOS)


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    dropout_rate: float = 0.5
    max_decode_len: int = 60
    beam_width: int = 5

    def __post_init__(self):
        if self.vocab_size < 6:
            raise nc.ConfigError("vocab_size must cover the 5 specials plus at least one token")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise nc.ConfigError("embed_dim and hidden_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise nc.ConfigError("dropout_rate must be in [0, 1)")
        if self.max_decode_len < 1 or self.beam_width < 1:
            raise nc.ConfigError("max_decode_len and beam_width must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    V, E, H = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
    return {
        "embedding": (V, E),
        "encoder.W": (E, 4 * H),
        "encoder.U": (H, 4 * H),
        "encoder.b": (4 * H,),
        "decoder.W": (E + H, 4 * H),
        "decoder.U": (H, 4 * H),
        "decoder.b": (4 * H,),
        "attention.W": (H, H),
        "attention.U": (H, H),
        "attention.v": (H,),
        "output.W": (H, V),
        "output.b": (V,),
    }


def init_params(cfg: GeneratorConfig, rng: np.random.Generator, scale: float = 0.1) -> dict[str, Tensor]:
    """Uniform(-scale, scale) weights; biases zero except forget gates at 1."""
    params = {}
    H = cfg.hidden_dim
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            values = np.zeros(shape)
            if name in ("encoder.b", "decoder.b"):
                values[H : 2 * H] = 1.0
        else:
            values = rng.uniform(-scale, scale, size=shape)
        params[name] = nc.parameter(values, name=name)
    return params


def zero_params(cfg: GeneratorConfig) -> dict[str, Tensor]:
    return {name: nc.parameter(np.zeros(shape), name=name) for name, shape in param_shapes(cfg).items()}


def check_params(cfg: GeneratorConfig, params: dict[str, Tensor]) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise DimensionError(f"missing generator parameter {name!r}")
        if params[name].shape != shape:
            raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def lstm_step(x: Tensor, h: Tensor, c: Tensor, W: Tensor, U: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on vectors ``[in]``/``[H]`` or batches ``[B, in]``/``[B, H]``."""
    H = h.shape[-1]
    if x.shape[-1] != W.shape[0] or U.shape != (H, 4 * H) or b.shape != (4 * H,) or x.ndim != h.ndim:
        raise DimensionError(f"lstm_step: x {x.shape}, h {h.shape}, W {W.shape}, U {U.shape}, b {b.shape}")
    if x.ndim == 1:
        h_new, c_new = lstm_step(nc.reshape(x, (1, -1)), nc.reshape(h, (1, H)), nc.reshape(c, (1, H)), W, U, b)
        return nc.reshape(h_new, (H,)), nc.reshape(c_new, (H,))
    z = nc.matmul(x, W) + nc.matmul(h, U) + b
    i = nc.sigmoid(z[..., 0:H])
    f = nc.sigmoid(z[..., H : 2 * H])
    o = nc.sigmoid(z[..., 2 * H : 3 * H])
    g = nc.tanh(z[..., 3 * H : 4 * H])
    c_new = f * c + i * g
    h_new = o * nc.tanh(c_new)
    return h_new, c_new


def run_lstm(xs: Tensor, mask: np.ndarray, W: Tensor, U: Tensor, b: Tensor, h0=None, c0=None):
    """Left-to-right LSTM over ``xs [B, L, in]``; state freezes where mask is false.

    Returns (stacked hidden states [B, L, H], final h, final c).
    """
    B, L = xs.shape[0], xs.shape[1]
    H = U.shape[0]
    h = h0 if h0 is not None else Tensor(np.zeros((B, H)))
    c = c0 if c0 is not None else Tensor(np.zeros((B, H)))
    mask = np.asarray(mask, dtype=bool)
    states = []
    for t in range(L):
        h_new, c_new = lstm_step(xs[:, t, :], h, c, W, U, b)
        m = mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            h = nc.where(m[:, None], h_new, h)
            c = nc.where(m[:, None], c_new, c)
        states.append(h)
    return nc.stack(states, axis=1), h, c


@dataclass
class EncoderOutput:
    states: Tensor  # [B, S, H]
    keys: Tensor  # states @ attention.U, [B, S, H]
    mask: np.ndarray  # [B, S]
    h: Tensor
    c: Tensor


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _encode(src: np.ndarray, params, cfg: GeneratorConfig, training: bool, rng) -> EncoderOutput:
    if src.size and (src.min() < 0 or src.max() >= cfg.vocab_size):
        raise IndexError(f"source id out of range for vocabulary of size {cfg.vocab_size}")
    mask = src != PAD
    emb = nc.take_rows(params["embedding"], src)
    emb = nc.dropout(emb, cfg.dropout_rate, training, rng)
    states, h, c = run_lstm(emb, mask, params["encoder.W"], params["encoder.U"], params["encoder.b"])
    keys = nc.matmul(states, params["attention.U"])
    return EncoderOutput(states, keys, mask, h, c)


def encode_sequence(src_ids, params, cfg: GeneratorConfig, training: bool = False, rng=None) -> Tensor:
    """Encoder hidden states: ``[S, H]`` for one sequence, ``[B, S, H]`` for a batch."""
    src, single = _as_batch(src_ids)
    enc = _encode(src, params, cfg, training, rng)
    return enc.states[0] if single else enc.states


def attend(s: Tensor, states: Tensor, mask, params, keys: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Additive attention of decoder state ``s`` over encoder ``states``.

    Accepts ``s [H]`` with ``states [S, H]`` or the batched ``[B, H]`` / ``[B, S, H]``.
    Returns (context, weights).
    """
    single = s.ndim == 1
    if single:
        s = nc.reshape(s, (1, -1))
        states = nc.reshape(states, (1,) + states.shape)
        if keys is not None:
            keys = nc.reshape(keys, (1,) + keys.shape)
        mask = np.asarray(mask, dtype=bool)[None, :]
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("attention needs at least one unmasked position per row")
    B, S, H = states.shape
    if keys is None:
        keys = nc.matmul(states, params["attention.U"])
    query = nc.reshape(nc.matmul(s, params["attention.W"]), (B, 1, H))
    scores = nc.matmul(nc.tanh(keys + query), params["attention.v"])  # [B, S]
    if not mask.all():
        scores = nc.masked_fill(scores, ~mask, -np.inf)
    weights = nc.softmax(scores, axis=-1)
    context = nc.reshape(nc.matmul(nc.reshape(weights, (B, 1, S)), states), (B, H))
    if single:
        return nc.reshape(context, (H,)), nc.reshape(weights, (S,))
    return context, weights


def _decoder_step(x_emb: Tensor, h: Tensor, c: Tensor, enc: EncoderOutput, params, cfg, training, rng):
    context, _ = attend(h, enc.states, enc.mask, params, keys=enc.keys)
    x = nc.concat([x_emb, context], axis=-1)
    h, c = lstm_step(x, h, c, params["decoder.W"], params["decoder.U"], params["decoder.b"])
    out = nc.dropout(h, cfg.dropout_rate, training, rng)
    logits = nc.matmul(out, params["output.W"]) + params["output.b"]
    return logits, h, c


# ---------------------------------------------------------------------------
# training-time forward passes
# ---------------------------------------------------------------------------


def teacher_forced_forward(src, tgt, params, cfg: GeneratorConfig, training: bool = False, rng=None) -> Tensor:
    """Logits ``[B, T-1, V]`` predicting ``tgt[:, 1:]`` from ``tgt[:, :-1]``."""
    src = np.asarray(src, dtype=np.int64)
    tgt = np.asarray(tgt, dtype=np.int64)
    enc = _encode(src, params, cfg, training, rng)
    inputs = nc.take_rows(params["embedding"], tgt[:, :-1])
    h, c = enc.h, enc.c
    steps = []
    for t in range(tgt.shape[1] - 1):
        logits, h, c = _decoder_step(inputs[:, t, :], h, c, enc, params, cfg, training, rng)
        steps.append(logits)
    return nc.stack(steps, axis=1)


def mle_loss(src, tgt, params, cfg: GeneratorConfig, training: bool = False, rng=None) -> Tensor:
    """Mean token cross-entropy against ``tgt[:, 1:]``, PAD positions excluded."""
    tgt = np.asarray(tgt, dtype=np.int64)
    logits = teacher_forced_forward(src, tgt, params, cfg, training, rng)
    B, T, V = logits.shape
    gold = tgt[:, 1:].reshape(-1)
    return nc.cross_entropy(nc.reshape(logits, (B * T, V)), gold, weights=(gold != PAD))


def soft_decode(src_ids, params, cfg: GeneratorConfig, steps: int, rng=None, noise: bool = True) -> Tensor:
    """Differentiable decoding: each step emits a full distribution.

    The next input is the expected embedding under that distribution.
    Returns ``[steps, V]`` for one sequence or ``[B, steps, V]`` for a batch.
    """
    if not 1 <= steps <= cfg.max_decode_len:
        raise ContractError(f"steps must be in [1, {cfg.max_decode_len}], got {steps}")
    src, single = _as_batch(src_ids)
    enc = _encode(src, params, cfg, noise, rng)
    B = src.shape[0]
    x = nc.take_rows(params["embedding"], np.full(B, SOS))
    h, c = enc.h, enc.c
    dists = []
    for _ in range(steps):
        logits, h, c = _decoder_step(x, h, c, enc, params, cfg, noise, rng)
        p = nc.softmax(logits, axis=-1)
        dists.append(p)
        x = nc.matmul(p, params["embedding"])
    out = nc.stack(dists, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class DecodeResult:
    ids: list[int]  # generated ids, EOS included when the hypothesis finished
    log_prob: float

    @property
    def normalized_score(self) -> float:
        return self.log_prob / len(self.ids)

    @property
    def token_ids(self) -> list[int]:
        return self.ids[:-1] if self.ids and self.ids[-1] == EOS else list(self.ids)

    @property
    def finished(self) -> bool:
        return bool(self.ids) and self.ids[-1] == EOS


def _log_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lp[..., list(_BANNED)] = -np.inf
    return lp


def _tile(enc: EncoderOutput, n: int) -> EncoderOutput:
    rep = lambda t: Tensor(np.repeat(t.values, n, axis=0))  # noqa: E731
    return EncoderOutput(rep(enc.states), rep(enc.keys), np.repeat(enc.mask, n, axis=0), rep(enc.h), rep(enc.c))


def greedy_decode(src_ids, params, cfg: GeneratorConfig, max_len: int | None = None, noise: bool = False, rng=None) -> DecodeResult:
    """Argmax decoding from SOS until EOS or ``max_len`` generated ids.

    Ties go to the lowest id. Dropout is active only when ``noise`` is set.
    """
    max_len = cfg.max_decode_len if max_len is None else max_len
    src, _ = _as_batch(src_ids)
    with nc.no_tape():
        enc = _encode(src, params, cfg, noise, rng)
        h, c = enc.h, enc.c
        prev = SOS
        ids: list[int] = []
        total = 0.0
        for _ in range(max_len):
            x = nc.take_rows(params["embedding"], np.array([prev]))
            logits, h, c = _decoder_step(x, h, c, enc, params, cfg, noise, rng)
            lp = _log_probs(logits.values)[0]
            tok = int(np.argmax(lp))
            total += float(lp[tok])
            ids.append(tok)
            if tok == EOS:
                break
            prev = tok
    return DecodeResult(ids, total)


def beam_decode(src_ids, params, cfg: GeneratorConfig, beam_width: int | None = None, max_len: int | None = None) -> list[DecodeResult]:
    """Beam search over cumulative log-probability.

    Each step keeps the best ``beam_width`` expansions overall; expansions that
    end in EOS or reach ``max_len`` retire. Retired hypotheses are ranked by
    log-probability per generated id, ties broken by the id sequence.
    """
    k = cfg.beam_width if beam_width is None else beam_width
    max_len = cfg.max_decode_len if max_len is None else max_len
    if k < 1:
        raise nc.ConfigError("beam width must be >= 1")
    src, _ = _as_batch(src_ids)
    finished: list[DecodeResult] = []
    with nc.no_tape():
        enc = _encode(src, params, cfg, False, None)
        live_ids: list[tuple[int, ...]] = [()]
        live_lp = np.zeros(1)
        h, c = enc.h, enc.c
        enc_n = enc
        slots = k
        while live_ids and slots > 0:
            n = len(live_ids)
            if enc_n.states.shape[0] != n:
                enc_n = _tile(enc, n)
            prev = np.array([ids[-1] if ids else SOS for ids in live_ids])
            x = nc.take_rows(params["embedding"], prev)
            logits, h, c = _decoder_step(x, h, c, enc_n, params, cfg, False, None)
            scores = live_lp[:, None] + _log_probs(logits.values)
            flat = scores.reshape(-1)
            finite = np.isfinite(flat)
            take = min(slots, int(finite.sum()))
            if take == 0:
                break
            cutoff = np.partition(flat[finite], -take)[-take]
            cand = np.flatnonzero(finite & (flat >= cutoff))
            V = scores.shape[1]
            ranked = sorted(cand, key=lambda j: (-flat[j], live_ids[j // V] + (int(j % V),)))[:take]
            next_ids, next_lp, rows = [], [], []
            for j in ranked:
                row, tok = divmod(int(j), V)
                ids = live_ids[row] + (tok,)
                if tok == EOS or len(ids) >= max_len:
                    finished.append(DecodeResult(list(ids), float(flat[j])))
                    slots -= 1
                else:
                    next_ids.append(ids)
                    next_lp.append(flat[j])
                    rows.append(row)
            live_ids, live_lp = next_ids, np.array(next_lp)
            if rows:
                h = Tensor(h.values[rows])
                c = Tensor(c.values[rows])
                enc_n = _tile(enc, len(rows))
    finished.sort(key=lambda r: (-r.normalized_score, r.ids))
    return finished[:k]


def score_sequence(src_ids, out_ids, params, cfg: GeneratorConfig) -> float:
    """Total log-probability of generating ``out_ids`` (PAD and SOS excluded from support)."""
    src, _ = _as_batch(src_ids)
    tgt = np.array([[SOS, *out_ids]], dtype=np.int64)
    with nc.no_tape():
        logits = teacher_forced_forward(src, tgt, params, cfg).values[0]
    lp = _log_probs(logits)
    return float(sum(lp[t, tok] for t, tok in enumerate(out_ids)))
