"""Train a small model on a synthetic copy task end to end: corpus files,
vocabularies, config snapshot, checkpoints, then greedy decoding.

Run: python demos/02_train_a_copy_model.py   (about half a minute)
"""

import os
import sys

import numpy as np

from cgru.cli import RunConfig, cmd_train, cmd_translate
from cgru.model import ModelConfig
from cgru.training import TrainingConfig

OUT = os.path.join(os.path.dirname(__file__), "_output", "copy_model")
WORDS = ["north", "south", "east", "west", "up", "down", "left", "right"]


def write_corpus(path, n, seed):
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for _ in range(n):
            k = rng.integers(1, 6)
            fh.write(" ".join(WORDS[i] for i in rng.integers(0, len(WORDS), k)) + "\n")


os.makedirs(OUT, exist_ok=True)
train_file = os.path.join(OUT, "train.txt")
heldout_file = os.path.join(OUT, "heldout.txt")
write_corpus(train_file, 300, seed=1)
write_corpus(heldout_file, 40, seed=2)

config = RunConfig(
    model=ModelConfig((10,), (32,), 10, 32, 32, 32, 32),
    training=TrainingConfig(batch_size=16, max_updates=400, validate_every=50,
                            patience=8, learning_rate=2e-3, seed=7),
    train_src=train_file, train_tgt=train_file,
    heldout_src=heldout_file, heldout_tgt=heldout_file,
    src_vocab_paths=(os.path.join(OUT, "src.vocab"),),
    tgt_vocab_path=os.path.join(OUT, "tgt.vocab"),
    out_dir=os.path.join(OUT, "run"),
)

print("training a copy model (logs one tab-separated line per update)...")
result = cmd_train(config, log=sys.stdout)
print(f"\nstopped by {result.stop_reason} after {result.updates} updates; "
      f"best held-out loss {result.best_score:.4f}")
print(f"checkpoints: {len(result.checkpoints)} in {config.out_dir}")

probes = ["north east south", "up up down", "left"]
outputs = cmd_translate([os.path.join(config.out_dir, "best.cgru")], probes, beam_size=4)
print("\ngreedy copies:")
for src, hyp in zip(probes, outputs):
    mark = "ok " if src == hyp else "BAD"
    print(f"  {mark} {src!r} -> {hyp!r}")
