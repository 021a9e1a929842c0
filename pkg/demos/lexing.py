"""Lex a few Java lines, build a vocabulary and round-trip them through ids."""

from advrepair import codetok

LINES = [
    'detectDeadlock(dbConn, e, "unlock");',
    "x >>>= 2; y->z; a::b",
    "if (count != 0x1F && ok) { total += 1.5e3f; }",
]

for line in LINES:
    toks = codetok.tokenize(line)
    print(line)
    print("  ", [(t.text, t.kind) for t in toks])

vocab = codetok.build_vocab(codetok.tokenize(line) for line in LINES)
print(f"\nvocabulary: {len(vocab)} entries, first ten {vocab.tokens[:10]}")

ids = codetok.encode(codetok.tokenize(LINES[0]), vocab, max_len=100)
print("encoded:", ids)
print("decoded:", codetok.detokenize(codetok.decode(ids, vocab)))

# lenient mode keeps going past a broken literal
print(codetok.tokenize('log("oops);', strict=False))
