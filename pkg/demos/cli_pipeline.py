"""prepare -> train -> evaluate -> suggest through the command-line entry point."""

import json
import tempfile
from pathlib import Path

from advrepair import cli, corpus

work = Path(tempfile.mkdtemp(prefix="advrepair-"))
corpus.save_pairs(work / "all.jsonl", corpus.synth_corpus(120, seed=5))

cli.main(["prepare", "--input", str(work / "all.jsonl"), "--output-dir", str(work / "data"), "--eval-count", "12"])

(work / "run.json").write_text(json.dumps({
    "embed_dim": 32, "hidden_dim": 64, "disc_embed_dim": 8, "disc_hidden_dim": 8,
    "epochs": 120, "batch_size": 4, "lr_g": 1e-2, "eval_every": 20, "early_stop_patience": 0, "max_decode_len": 16,
}))
cli.main([
    "train", "--config", str(work / "run.json"),
    "--train", str(work / "data" / "train.jsonl"), "--eval", str(work / "data" / "eval.jsonl"),
    "--vocab", str(work / "data" / "vocab.txt"), "--out-dir", str(work / "run"),
])
print(sorted(p.name for p in (work / "run").iterdir()))

cli.main(["evaluate", "--checkpoint", str(work / "run" / "final.ckpt"), "--eval", str(work / "data" / "eval.jsonl"), "--filter"])
cli.main(["suggest", "--checkpoint", str(work / "run" / "final.ckpt"), "--line", "cache.setEnabled(false);", "--top-k", "3", "--filter"])
print("artifacts in", work)
