import numpy as np
import pytest

from advrepair import codetok
from advrepair import discriminator as disc
from advrepair import generator as gen

# Reference fixes: buggy line, human fix, model fix.
REFERENCE_FIXES = [
    ("return new HiveQueryResultSet.Builder()",
     "return new HiveQueryResultSet.Builder(null)",
     "return new HiveQueryResultSet.Builder(null)"),
    ('detectDeadlock(e, "unlock");',
     'detectDeadlock(dbConn, e, "unlock" );',
     "detectDeadlock(dbConn, e, +++e);"),
    ("Utilities.clearWorkMap();",
     "Utilities.clearWorkMap(jconf);",
     "Utilities.clearWorkMap(jc);"),
    ("Processor childProcessor = routeContext.createProcessor(this);",
     "Processor childProcessor = this.createChildProcessor(routeContext, true);",
     "Processor childProcessor = this.createChildProcessor(routeContext, false);"),
]


# Weights wide enough that every gradient entry clears the finite-difference
# noise floor (about 5e-11 at step 1e-5 for losses of order 1).
GRAD_SCALE = 1.5


def random_generator(seed, V=12, E=4, H=5, dropout=0.0, max_len=8, scale=0.5):
    cfg = gen.GeneratorConfig(vocab_size=V, embed_dim=E, hidden_dim=H, dropout_rate=dropout, max_decode_len=max_len)
    params = gen.init_params(cfg, np.random.default_rng(seed), scale=scale)
    return cfg, params


def random_discriminator(seed, V=12, E=4, H=5, dropout=0.0, scale=0.5):
    cfg = disc.DiscriminatorConfig(vocab_size=V, embed_dim=E, hidden_dim=H, dropout_rate=dropout)
    return cfg, disc.init_params(cfg, np.random.default_rng(seed), scale=scale)


@pytest.fixture
def tiny_vocab():
    return codetok.Vocabulary(list(codetok.SPECIALS) + ["a", "b", "c", "(", ")", ";", "x"])


# -- acceptance reporting -----------------------------------------------------

ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"{cid}: {status}  {detail}")


MEMO_EPOCHS = 130


@pytest.fixture(scope="session")
def memorized(tmp_path_factory):
    """A small model trained (MLE only) until it reproduces its 8 training pairs."""
    from advrepair import corpus, trainer

    pairs = corpus.synth_corpus(8, seed=1)
    vocab = codetok.build_vocab([codetok.tokenize(t) for p in pairs for t in (p.buggy, p.fixed)])
    cfg = trainer.TrainConfig(
        epochs=MEMO_EPOCHS, batch_size=2, lambda_adv=0.0, lr_g=1e-2, early_stop_patience=0,
        eval_every=MEMO_EPOCHS, seed=0,
    )
    _, state = trainer.train(
        pairs, pairs, cfg, vocab=vocab,
        gen_config=gen.GeneratorConfig(len(vocab), 32, 64, 0.1, 20),
        disc_config=disc.DiscriminatorConfig(len(vocab), 16, 16),
    )
    out = tmp_path_factory.mktemp("memorized")
    corpus.save_pairs(out / "pairs.jsonl", pairs)
    trainer.save_checkpoint(out / "model.ckpt", state)
    trainer.save_checkpoint(out / "production.ckpt", state, production=True)
    return pairs, state, out
