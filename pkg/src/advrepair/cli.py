"""Command-line entry point: prepare, train, evaluate, suggest.

Exit codes: 0 success, 2 usage/config/data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import codetok, corpus, metrics, trainer
from . import generator as gen
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .numcore import ConfigError, make_rng
from .trainer import CheckpointError, TrainConfig

log = logging.getLogger("advrepair")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # paths
    train: str | None = None
    eval: str | None = None
    out_dir: str | None = None
    vocab: str | None = None
    resume: str | None = None
    # vocabulary
    min_freq: int = 1
    max_vocab: int = 50_000
    # generator
    embed_dim: int = 64
    hidden_dim: int = 128
    dropout_rate: float = 0.5
    max_decode_len: int = 60
    beam_width: int = 5
    # discriminator
    disc_embed_dim: int = 64
    disc_hidden_dim: int = 128
    disc_dropout_rate: float = 0.2
    # trainer
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
    early_stop_patience: int = 5
    warmup_epochs: int = 0
    max_src_len: int = 100
    max_tgt_len: int = 100
    init_scale: float = 0.1
    zero_init: bool = False

    REQUIRED_PATHS = ("train", "eval", "out_dir")
    INPUT_PATHS = ("train", "eval", "vocab", "resume")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def generator_config(self, vocab_size: int) -> GeneratorConfig:
        return GeneratorConfig(vocab_size, self.embed_dim, self.hidden_dim, self.dropout_rate, self.max_decode_len, self.beam_width)

    def discriminator_config(self, vocab_size: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(vocab_size, self.disc_embed_dim, self.disc_hidden_dim, self.disc_dropout_rate)


def _field_types() -> dict[str, type]:
    types = {"str | None": str, "int": int, "float": float, "bool": bool}
    return {f.name: types[f.type] for f in fields(RunConfig)}


def resolve_run_config(file_values: dict | None, flag_values: dict) -> RunConfig:
    """Merge defaults < config file < flags (flags that are None are unset)."""
    types = _field_types()
    merged = {}
    for source in (file_values or {}, {k: v for k, v in flag_values.items() if v is not None}):
        unknown = set(source) - set(types)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, value in source.items():
            want = types[key]
            if value is not None:
                ok = isinstance(value, want) and not (want is not bool and isinstance(value, bool))
                if want is float and isinstance(value, int) and not isinstance(value, bool):
                    value, ok = float(value), True
                if not ok:
                    raise UsageError(f"config key {key!r} must be {want.__name__}, got {value!r}")
            merged[key] = value
    return RunConfig(**merged)


def validate_run_config(cfg: RunConfig) -> None:
    for key in RunConfig.REQUIRED_PATHS:
        if getattr(cfg, key) is None:
            raise UsageError(f"missing required config key {key!r}")
    for key in RunConfig.INPUT_PATHS:
        value = getattr(cfg, key)
        if value is not None and not Path(value).exists():
            raise UsageError(f"config key {key!r}: path {value} does not exist")
    try:
        cfg.train_config()
        cfg.generator_config(6)
        cfg.discriminator_config(6)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if cfg.min_freq < 1 or cfg.max_vocab <= len(codetok.SPECIALS):
        raise UsageError("min_freq must be >= 1 and max_vocab > 5")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_prepare(args) -> int:
    pairs = corpus.load_pairs(args.input)
    parts, stats = corpus.prepare(pairs, args.eval_count, args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save_pairs(out / "train.jsonl", parts.train)
    corpus.save_pairs(out / "eval.jsonl", parts.eval)
    _write_json(out / "split.json", parts.manifest())
    streams = [codetok.tokenize(p.buggy, strict=False) for p in parts.train]
    streams += [codetok.tokenize(p.fixed, strict=False) for p in parts.train]
    vocab = codetok.build_vocab(streams, args.min_freq, args.max_vocab)
    vocab.save(out / "vocab.txt")
    stats["vocab_size"] = len(vocab)
    _write_json(out / "stats.json", stats)
    for key, value in stats.items():
        print(f"{key:>20}: {value}")
    return 0


def cmd_train(args) -> int:
    file_values = None
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a JSON object")
    flags = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    cfg = resolve_run_config(file_values, flags)
    validate_run_config(cfg)

    train_pairs = corpus.load_pairs(cfg.train)
    eval_pairs = corpus.load_pairs(cfg.eval)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", asdict(cfg))
    tcfg = cfg.train_config()

    state = None
    vocab = None
    if cfg.resume:
        state = trainer.load_checkpoint(cfg.resume)
        if state.is_production:
            raise UsageError("cannot resume from a production export")
    elif cfg.vocab:
        vocab = codetok.Vocabulary.load(cfg.vocab)
    else:
        streams = [codetok.tokenize(p.buggy, strict=False) for p in train_pairs]
        streams += [codetok.tokenize(p.fixed, strict=False) for p in train_pairs]
        vocab = codetok.build_vocab(streams, cfg.min_freq, cfg.max_vocab)

    kwargs = {}
    if state is None:
        kwargs = dict(
            vocab=vocab,
            gen_config=cfg.generator_config(len(vocab)),
            disc_config=cfg.discriminator_config(len(vocab)),
        )

    def show(rec):
        bits = [f"epoch {rec['epoch']}"]
        for key in ("g_mle_loss", "g_adv_loss", "d_loss", "eval_bleu4", "eval_exact_match"):
            if rec.get(key) is not None:
                bits.append(f"{key}={rec[key]:.4f}")
        print("  ".join(bits), flush=True)

    try:
        report, state = trainer.train(train_pairs, eval_pairs, tcfg, state, checkpoint_dir=out, on_epoch=show, **kwargs)
    except trainer.TrainingDiverged as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 3
    state.vocab.save(out / "vocab.txt")
    (out / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    (out / "timing.jsonl").write_text(
        "".join(json.dumps({"epoch": r["epoch"], "wall_time": r.get("wall_time")}) + "\n" for r in report.records),
        encoding="utf-8",
    )
    (out / "summary.txt").write_text(report.summary_table(), encoding="utf-8")
    trainer.save_checkpoint(out / "production.ckpt", state, production=True)
    print(f"wrote checkpoints and report to {out}")
    return 0


def _load_model(path):
    try:
        return trainer.load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_evaluate(args) -> int:
    state = _load_model(args.checkpoint)
    pairs = corpus.load_pairs(args.eval)
    max_src = state.train_config.max_src_len if state.train_config else 100
    report = metrics.evaluate(
        state.gen_params, state.gen_config, pairs, state.vocab,
        beam_width=args.beam, max_src_len=max_src, with_filtered=args.filter,
    )
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "eval_table.txt").write_text(report.table() + "\n", encoding="utf-8")
    if args.json:
        print(report.to_json())
    else:
        print(report.table())
        if report.filtered is not None:
            f = report.filtered
            print(
                f"after filter: kept={f['n_pass']} bleu4_mean={f['bleu4_mean']:.4f} "
                f"exact={f['n_exact']} ({f['exact_match_rate']:.1%})"
            )
    return 0


def suggest_for_line(line: str, state, top_k: int | None = None, stochastic: int = 0, rng=None, max_src: int = 100):
    """Candidate patches for one buggy line, best first.

    Deterministic mode returns ``top_k`` (default 1) beam or greedy results;
    stochastic mode returns the distinct results of ``stochastic`` noisy greedy
    decodes, capped at ``top_k`` when given.
    """
    if top_k is not None and top_k < 1:
        raise UsageError("--top-k must be >= 1")
    try:
        tokens = codetok.tokenize(line)
    except codetok.LexError as exc:
        raise UsageError(f"cannot tokenize input: {exc}") from None
    src = codetok.encode(tokens, state.vocab, max_src)
    cfg, params = state.gen_config, state.gen_params
    if stochastic:
        seen, results = set(), []
        for _ in range(stochastic):
            r = gen.greedy_decode(src, params, cfg, noise=True, rng=rng)
            if tuple(r.ids) not in seen:
                seen.add(tuple(r.ids))
                results.append(r)
        results.sort(key=lambda r: (-r.normalized_score, r.ids))
        results = results[:top_k]
    elif top_k and top_k > 1:
        results = gen.beam_decode(src, params, cfg, beam_width=top_k)
    else:
        results = [gen.greedy_decode(src, params, cfg)]
    out = []
    for r in results:
        toks = codetok.decode(r.token_ids, state.vocab)
        verdict = metrics.syntax_filter(toks)
        out.append({
            "patch": codetok.detokenize(toks),
            "tokens": toks,
            "score": r.normalized_score,
            "filter": verdict.to_dict(),
        })
    return out


def cmd_suggest(args) -> int:
    state = _load_model(args.checkpoint)
    if args.line is not None:
        lines = [args.line]
    else:
        lines = [ln for ln in Path(args.file).read_text(encoding="utf-8").splitlines() if ln.strip()]
    rng = make_rng(args.seed)
    max_src = state.train_config.max_src_len if state.train_config else 100
    docs = []
    for line in lines:
        cands = suggest_for_line(line, state, args.top_k, args.stochastic, rng, max_src)
        doc = {"input": line, "candidates": cands}
        if args.filter:
            doc["accepted"] = [c["patch"] for c in cands if c["filter"]["pass"]]
        docs.append(doc)
    if args.json:
        print(json.dumps(docs if len(docs) > 1 else docs[0], indent=2))
        return 0
    for doc in docs:
        print(f"> {doc['input']}")
        for i, c in enumerate(doc["candidates"], start=1):
            verdict = "pass" if c["filter"]["pass"] else "fail: " + "; ".join(
                metrics.FilterReason(**r).describe() for r in c["filter"]["reasons"]
            )
            print(f"  {i}. {c['patch']}    score={c['score']:.4f}  filter={verdict}")
        if args.filter:
            print("  accepted:" + ("" if doc["accepted"] else " (none)"))
            for patch in doc["accepted"]:
                print(f"    {patch}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advrepair", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare", help="dedup, keep single-line fixes, split, build vocabulary")
    prep.add_argument("--input", required=True)
    prep.add_argument("--output-dir", required=True)
    prep.add_argument("--eval-count", type=int, required=True)
    prep.add_argument("--seed", type=int, default=0)
    prep.add_argument("--min-freq", type=int, default=1)
    prep.add_argument("--max-vocab", type=int, default=50_000)
    prep.set_defaults(func=cmd_prepare)

    tr = sub.add_parser("train", help="adversarial training run")
    tr.add_argument("--config", help="JSON file of run settings; flags override it")
    types = _field_types()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if types[f.name] is bool:
            tr.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            tr.add_argument(flag, dest=f.name, type=types[f.name], default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="BLEU-4 / exact match / filter report")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--eval", required=True)
    ev.add_argument("--beam", type=int, default=None, metavar="K")
    ev.add_argument("--filter", action="store_true", help="also report metrics over filter-passing candidates")
    ev.add_argument("--out-dir")
    ev.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    ev.set_defaults(func=cmd_evaluate)

    sg = sub.add_parser("suggest", help="propose patches for buggy lines")
    sg.add_argument("--checkpoint", required=True)
    src = sg.add_mutually_exclusive_group(required=True)
    src.add_argument("--line")
    src.add_argument("--file")
    sg.add_argument("--top-k", type=int, default=None, metavar="K")
    sg.add_argument("--filter", action="store_true")
    sg.add_argument("--stochastic", type=int, default=0, metavar="N")
    sg.add_argument("--seed", type=int, default=0)
    sg.add_argument("--json", action="store_true")
    sg.set_defaults(func=cmd_suggest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, corpus.LoadError, ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
