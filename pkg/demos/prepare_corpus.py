"""Clean and split a synthetic pair corpus the same way `advrepair prepare` does."""

from advrepair import corpus

pairs = corpus.synth_corpus(60, seed=3)
pairs += pairs[:4]  # a few exact duplicates
pairs.append(corpus.CodePair("multi", "a();", "a();\nb();"))

parts, stats = corpus.prepare(pairs, eval_count=10, seed=0)
for k, v in stats.items():
    print(f"{k:>20}: {v}")

print("\nsample training pairs:")
for p in parts.train[:5]:
    print(f"  {p.buggy:<34} -> {p.fixed}")
