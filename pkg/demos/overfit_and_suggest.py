"""Memorise a handful of pairs with MLE, add a short adversarial phase, then suggest fixes.

Runs in a few seconds on one CPU core.
"""

from advrepair import cli, codetok, corpus, metrics, trainer
from advrepair.discriminator import DiscriminatorConfig
from advrepair.generator import GeneratorConfig

pairs = corpus.synth_corpus(8, seed=1)
vocab = codetok.build_vocab(
    [codetok.tokenize(p.buggy) for p in pairs] + [codetok.tokenize(p.fixed) for p in pairs]
)
gcfg = GeneratorConfig(len(vocab), embed_dim=32, hidden_dim=64, dropout_rate=0.1, max_decode_len=20)
dcfg = DiscriminatorConfig(len(vocab), embed_dim=16, hidden_dim=16)

mle = trainer.TrainConfig(epochs=120, batch_size=2, lambda_adv=0.0, lr_g=1e-2, early_stop_patience=0, eval_every=40)


def show(report):
    evals = [r for r in report.records if r.get("eval_bleu4") is not None]
    print(trainer.TrainReport(evals).summary_table())


report, state = trainer.train(pairs, pairs, mle, vocab=vocab, gen_config=gcfg, disc_config=dcfg)
show(report)

adv = trainer.TrainConfig(epochs=130, batch_size=2, lambda_adv=0.1, lr_g=1e-3, early_stop_patience=0, eval_every=10)
report, state = trainer.train(pairs, pairs, adv, state)
show(report)

print(metrics.evaluate(state.gen_params, gcfg, pairs, vocab).table(width=30))

prod = trainer.export_production(state)
for line in (pairs[0].buggy, "conn.setStrict(false);"):
    print(f"\n> {line}")
    for c in cli.suggest_for_line(line, prod, top_k=3):
        print(f"  {c['patch']:<36} score={c['score']:.4f} filter={'pass' if c['filter']['pass'] else 'fail'}")
