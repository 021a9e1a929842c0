"""Adversarial training loop and checkpoint persistence."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import codetok, corpus, metrics
from . import discriminator as disc
from . import generator as gen
from . import numcore as nc
from .codetok import Vocabulary
from .corpus import Batch, CodePair
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .numcore import AdamState, ConfigError, ContractError, Tensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"ADVRCKPT"
RNG_STREAMS = ("init", "shuffle", "g_noise", "adv", "d")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, what: str):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lambda_mle: float = 1.0
    lambda_adv: float = 0.1
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    d_steps_per_g_step: int = 1
    grad_clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 1
    early_stop_patience: int = 5  # 0 disables early stopping
    warmup_epochs: int = 0
    max_src_len: int = 100
    max_tgt_len: int = 100
    init_scale: float = 0.1
    zero_init: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lambda_mle < 0 or self.lambda_adv < 0 or self.lambda_mle + self.lambda_adv <= 0:
            raise ConfigError("loss weights must be non-negative with a positive sum")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.d_steps_per_g_step < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1, d_steps_per_g_step >= 0")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.early_stop_patience < 0 or self.warmup_epochs < 0:
            raise ConfigError("early_stop_patience and warmup_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    """Everything a checkpoint carries."""

    vocab: Vocabulary
    gen_config: GeneratorConfig
    gen_params: dict[str, Tensor]
    disc_config: DiscriminatorConfig | None = None
    disc_params: dict[str, Tensor] | None = None
    adam_g: AdamState | None = None
    adam_d: AdamState | None = None
    train_config: TrainConfig | None = None
    epoch: int = 0
    rngs: dict[str, np.random.Generator] | None = None
    report: list[dict] = field(default_factory=list)
    best_exact: float | None = None
    bad_evals: int = 0
    kind: str = "training"

    @property
    def is_production(self) -> bool:
        return self.kind == "production"


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    def to_jsonl(self, include_time: bool = False) -> str:
        out = []
        for r in self.records:
            rec = dict(r) if include_time else {k: v for k, v in r.items() if k != "wall_time"}
            out.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in out)

    def summary_table(self) -> str:
        cols = ("epoch", "d_loss", "g_adv_loss", "g_mle_loss", "d_accuracy", "eval_bleu4", "eval_exact_match")
        lines = ["  ".join(f"{c:>16}" for c in cols)]
        for r in self.records:
            cells = []
            for c in cols:
                v = r.get(c)
                cells.append(f"{'-':>16}" if v is None else (f"{v:>16d}" if isinstance(v, int) else f"{v:>16.6f}"))
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"


def spawn_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: nc.make_rng(ss) for name, ss in zip(RNG_STREAMS, children)}


def new_state(
    vocab: Vocabulary,
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    config: TrainConfig,
) -> TrainState:
    if gen_config.vocab_size != len(vocab) or disc_config.vocab_size != len(vocab):
        raise ConfigError("model vocab_size must equal the vocabulary length")
    rngs = spawn_rngs(config.seed)
    if config.zero_init:
        gp, dp = gen.zero_params(gen_config), disc.zero_params(disc_config)
    else:
        gp = gen.init_params(gen_config, rngs["init"], config.init_scale)
        dp = disc.init_params(disc_config, rngs["init"], config.init_scale)
    return TrainState(
        vocab=vocab,
        gen_config=gen_config,
        gen_params=gp,
        disc_config=disc_config,
        disc_params=dp,
        adam_g=AdamState(lr=config.lr_g),
        adam_d=AdamState(lr=config.lr_d),
        train_config=config,
        rngs=rngs,
    )


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def _buggy_rows(batch: Batch) -> list[np.ndarray]:
    return [batch.src[r, : batch.src_len[r]] for r in range(len(batch))]


def _human_fixes(batch: Batch) -> list[np.ndarray]:
    return [batch.tgt[r, 1 : batch.tgt_len[r]] for r in range(len(batch))]


def _fake_lengths(batch: Batch, cfg: GeneratorConfig) -> tuple[int, np.ndarray]:
    lengths = np.minimum(batch.tgt_len - 1, cfg.max_decode_len)
    return int(lengths.max()), lengths


def soft_fakes(batch: Batch, state: TrainState, rng) -> tuple[Tensor, np.ndarray]:
    """Generated fixes for a batch as distributions, one row per human-fix length."""
    steps, lengths = _fake_lengths(batch, state.gen_config)
    dists = gen.soft_decode(batch.src, state.gen_params, state.gen_config, steps, rng=rng, noise=True)
    return dists, lengths


def _require_training(state: TrainState) -> None:
    if state.is_production or state.disc_params is None or state.adam_d is None:
        raise ContractError("production checkpoint carries no discriminator; cannot train it")


def discriminator_step(
    batch: Batch,
    state: TrainState,
    fake_fn: Callable[[Batch], object] | None = None,
) -> tuple[float, float]:
    """One discriminator update on human vs generated pairs; returns (d_loss, accuracy).

    ``fake_fn`` overrides where generated fixes come from; by default they are
    soft decodes from the current generator, treated as constants.
    """
    _require_training(state)
    rng = state.rngs["d"]
    B = len(batch)
    buggy = _buggy_rows(batch)
    with nc.no_tape():
        if fake_fn is None:
            dists, lengths = soft_fakes(batch, state, rng)
            fakes, fake_lengths = Tensor(dists.values), lengths
        else:
            fakes, fake_lengths = fake_fn(batch), None
    params = state.disc_params
    for p in params.values():
        p.zero_grad()
    with nc.Tape() as tape:
        p_real = disc.score_batch(buggy, _human_fixes(batch), params, state.disc_config, True, rng)
        p_fake = disc.score_batch(buggy, fakes, params, state.disc_config, True, rng, fix_lengths=fake_lengths)
        d_loss = (nc.bce(p_real, np.ones(B)) + nc.bce(p_fake, np.zeros(B))) * 0.5
    acc = (np.sum(p_real.values > 0.5) + np.sum(p_fake.values < 0.5)) / (2 * B)
    if not np.isfinite(d_loss.item()):
        return d_loss.item(), float(acc)  # caller aborts; leave params untouched
    nc.backward(d_loss, tape)
    nc.adam_step(params, state.adam_d)
    return d_loss.item(), float(acc)


def generator_step(batch: Batch, state: TrainState, lambda_mle: float, lambda_adv: float, grad_clip_norm: float) -> tuple[float, float | None]:
    """One generator update on the weighted MLE + adversarial objective.

    Returns (g_mle_loss, g_adv_loss); the adversarial value is None when its
    weight is zero, in which case nothing adversarial is computed at all.
    """
    params = state.gen_params
    cfg = state.gen_config
    for p in params.values():
        p.zero_grad()
    with nc.Tape() as tape:
        mle = gen.mle_loss(batch.src, batch.tgt, params, cfg, training=True, rng=state.rngs["g_noise"])
        total = mle * lambda_mle
        adv = None
        if lambda_adv > 0:
            adv = adversarial_loss(batch, state, state.rngs["adv"])
            total = total + adv * lambda_adv
    if not np.isfinite(total.item()):
        return mle.item(), (None if adv is None else adv.item())
    nc.backward(total, tape)
    nc.clip_grad_norm(params.values(), grad_clip_norm)
    nc.adam_step(params, state.adam_g)
    return mle.item(), (None if adv is None else adv.item())


def adversarial_loss(batch: Batch, state: TrainState, rng) -> Tensor:
    """Mean ``-log D(buggy, soft_decode(buggy))`` with the discriminator frozen."""
    _require_training(state)
    dists, lengths = soft_fakes(batch, state, rng)
    frozen = {k: Tensor(v.values) for k, v in state.disc_params.items()}
    p = disc.score_batch(_buggy_rows(batch), dists, frozen, state.disc_config, False, None, fix_lengths=lengths)
    return nc.bce(p, np.ones(len(batch)))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def _mean(xs):
    return None if not xs else math.fsum(xs) / len(xs)


def train(
    train_pairs: Sequence[CodePair],
    eval_pairs: Sequence[CodePair] | None,
    config: TrainConfig,
    state: TrainState | None = None,
    *,
    vocab: Vocabulary | None = None,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
    checkpoint_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[TrainReport, TrainState]:
    """Run epochs ``state.epoch + 1 .. config.epochs``.

    With ``checkpoint_dir`` set, ``best.ckpt`` follows the best eval exact
    match and ``final.ckpt`` is written at the end.
    """
    if not train_pairs:
        raise ContractError("training set is empty")
    if state is None:
        if vocab is None:
            vocab = codetok.build_vocab(
                [codetok.tokenize(p.buggy, strict=False) for p in train_pairs]
                + [codetok.tokenize(p.fixed, strict=False) for p in train_pairs]
            )
        gen_config = gen_config or GeneratorConfig(vocab_size=len(vocab))
        disc_config = disc_config or DiscriminatorConfig(vocab_size=len(vocab))
        state = new_state(vocab, gen_config, disc_config, config)
    elif state.train_config != config:
        if state.adam_g is not None:
            state.adam_g.lr = config.lr_g
        if state.adam_d is not None:
            state.adam_d.lr = config.lr_d
        if replace(state.train_config, epochs=config.epochs) != config:
            state.best_exact, state.bad_evals = None, 0
        state.train_config = config
    if state.rngs is None:
        state.rngs = spawn_rngs(config.seed)
    if state.adam_g is None:
        state.adam_g = AdamState(lr=config.lr_g)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    report = TrainReport(records=list(state.report))

    for epoch in range(state.epoch + 1, config.epochs + 1):
        started = time.perf_counter()
        lam_adv = 0.0 if epoch <= config.warmup_epochs else config.lambda_adv
        batches = corpus.make_batches(
            train_pairs, state.vocab, config.batch_size, config.max_src_len, config.max_tgt_len,
            shuffle_seed=state.rngs["shuffle"],
        )
        d_losses, d_accs, g_mles, g_advs = [], [], [], []
        for b, batch in enumerate(batches, start=1):
            if lam_adv > 0:
                for _ in range(config.d_steps_per_g_step):
                    d_loss, d_acc = discriminator_step(batch, state)
                    if not math.isfinite(d_loss):
                        raise TrainingDiverged(epoch, b, "discriminator loss")
                    d_losses.append(d_loss)
                    d_accs.append(d_acc)
            g_mle, g_adv = generator_step(batch, state, config.lambda_mle, lam_adv, config.grad_clip_norm)
            if not math.isfinite(g_mle) or (g_adv is not None and not math.isfinite(g_adv)):
                raise TrainingDiverged(epoch, b, "generator loss")
            g_mles.append(g_mle)
            if g_adv is not None:
                g_advs.append(g_adv)

        record = {
            "epoch": epoch,
            "d_loss": _mean(d_losses),
            "d_accuracy": _mean(d_accs),
            "g_mle_loss": _mean(g_mles),
            "g_adv_loss": _mean(g_advs),
            "eval_bleu4": None,
            "eval_exact_match": None,
        }
        evaluated = bool(eval_pairs) and epoch % config.eval_every == 0
        if evaluated:
            ev = metrics.evaluate(state.gen_params, state.gen_config, eval_pairs, state.vocab, max_src_len=config.max_src_len)
            record["eval_bleu4"] = ev.bleu4_mean
            record["eval_exact_match"] = ev.exact_match_rate
        state.epoch = epoch
        state.report.append(dict(record))
        record["wall_time"] = time.perf_counter() - started
        report.records.append(record)
        log.info("epoch %d: %s", epoch, {k: v for k, v in record.items() if v is not None})
        if on_epoch is not None:
            on_epoch(record)

        if evaluated:
            if state.best_exact is None or record["eval_exact_match"] > state.best_exact:
                state.best_exact = record["eval_exact_match"]
                state.bad_evals = 0
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "best.ckpt", state)
            else:
                state.bad_evals += 1
                if config.early_stop_patience and state.bad_evals >= config.early_stop_patience:
                    report.stopped_early = True
                    break

    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.ckpt", state)
        if not (ckpt_dir / "best.ckpt").exists():
            save_checkpoint(ckpt_dir / "best.ckpt", state)
    return report, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def export_production(state: TrainState) -> TrainState:
    """Generator and vocabulary only; the discriminator is dropped."""
    return TrainState(
        vocab=state.vocab,
        gen_config=state.gen_config,
        gen_params={k: nc.parameter(v.values.copy(), name=k) for k, v in state.gen_params.items()},
        epoch=state.epoch,
        kind="production",
    )


def _rng_to_json(rng: np.random.Generator) -> dict:
    def conv(x):
        if isinstance(x, np.ndarray):
            return [int(v) for v in x]
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.integer):
            return int(x)
        return x

    return conv(rng.bit_generator.state)


def _rng_from_json(d: dict) -> np.random.Generator:
    if d.get("bit_generator") != "Philox":
        raise CheckpointError(f"unsupported bit generator {d.get('bit_generator')!r}")
    bg = np.random.Philox()
    st = copy.deepcopy(d)
    st["state"] = {k: np.array(v, dtype=np.uint64) for k, v in d["state"].items()}
    st["buffer"] = np.array(d["buffer"], dtype=np.uint64)
    bg.state = st
    return np.random.Generator(bg)


def _adam_meta(a: AdamState | None) -> dict | None:
    if a is None:
        return None
    return {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t}


def save_checkpoint(path, state: TrainState, production: bool = False) -> None:
    """Write ``MAGIC | u64 manifest length | JSON manifest | float64 LE blob``."""
    if production and not state.is_production:
        state = export_production(state)
    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"generator/{k}", v.values) for k, v in sorted(state.gen_params.items())]
    if state.disc_params is not None:
        arrays += [(f"discriminator/{k}", v.values) for k, v in sorted(state.disc_params.items())]
    for tag, adam in (("adam_g", state.adam_g), ("adam_d", state.adam_d)):
        if adam is not None:
            arrays += [(f"{tag}/m/{k}", v) for k, v in sorted(adam.m.items())]
            arrays += [(f"{tag}/v/{k}", v) for k, v in sorted(adam.v.items())]

    tensors, offset = [], 0
    for name, arr in arrays:
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": state.kind,
        "generator_config": state.gen_config.to_dict(),
        "discriminator_config": state.disc_config.to_dict() if state.disc_config else None,
        "vocabulary": state.vocab.tokens,
        "train_config": state.train_config.to_dict() if state.train_config else None,
        "epoch": state.epoch,
        "adam_g": _adam_meta(state.adam_g),
        "adam_d": _adam_meta(state.adam_d),
        "rng_state": {k: _rng_to_json(g) for k, g in state.rngs.items()} if state.rngs else None,
        "report": state.report,
        "best_exact": state.best_exact,
        "bad_evals": state.bad_evals,
        "tensors": tensors,
        "blob_size": offset,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    blob = data[start + n :]
    if len(blob) != manifest["blob_size"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_size']}")

    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64)) * 8
        if t["offset"] != expected or t["offset"] + size > len(blob):
            raise CheckpointError(f"{path}: tensor {t['name']!r} disagrees with the manifest layout")
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=t["offset"]).astype(np.float64).reshape(t["shape"])
        expected += size
    if expected != len(blob):
        raise CheckpointError(f"{path}: tensor directory does not cover the blob")

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    gcfg = GeneratorConfig(**manifest["generator_config"])
    gparams = {k: nc.parameter(v, name=k) for k, v in group("generator/").items()}
    try:
        gen.check_params(gcfg, gparams)
    except nc.DimensionError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    dcfg = DiscriminatorConfig(**manifest["discriminator_config"]) if manifest["discriminator_config"] else None
    dparams = None
    if dcfg is not None:
        dparams = {k: nc.parameter(v, name=k) for k, v in group("discriminator/").items()}
        if {k: v.shape for k, v in dparams.items()} != disc.param_shapes(dcfg):
            raise CheckpointError(f"{path}: discriminator tensors do not match its config")

    def adam(tag):
        meta = manifest[tag]
        if meta is None:
            return None
        a = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], t=meta["t"])
        a.m = {k: v.copy() for k, v in group(f"{tag}/m/").items()}
        a.v = {k: v.copy() for k, v in group(f"{tag}/v/").items()}
        return a

    return TrainState(
        vocab=Vocabulary(manifest["vocabulary"]),
        gen_config=gcfg,
        gen_params=gparams,
        disc_config=dcfg,
        disc_params=dparams,
        adam_g=adam("adam_g"),
        adam_d=adam("adam_d"),
        train_config=TrainConfig(**manifest["train_config"]) if manifest["train_config"] else None,
        epoch=manifest["epoch"],
        rngs={k: _rng_from_json(v) for k, v in manifest["rng_state"].items()} if manifest["rng_state"] else None,
        report=manifest["report"],
        best_exact=manifest["best_exact"],
        bad_evals=manifest["bad_evals"],
        kind=manifest["kind"],
    )
