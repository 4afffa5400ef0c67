"""Beam search with n-best output, ensemble decoding, corpus scoring,
n-best rescoring, and the two visualization emitters (attention TSV and
search-graph DOT).

Run: python demos/03_decode_score_visualise.py
(trains its own tiny model first; reuses demos/_output/beam_demo if present)
"""

import os
import sys

import numpy as np

from cgru.cli import (
    RunConfig, cmd_rescore, cmd_score, cmd_train, cmd_translate,
    emit_attention, emit_search_graph, load_translation_model,
)
from cgru.data import factored_ids
from cgru.decoding import beam_search
from cgru.model import ModelConfig
from cgru.training import TrainingConfig

OUT = os.path.join(os.path.dirname(__file__), "_output", "beam_demo")
WORDS = ["one", "two", "three", "four", "five", "six"]


def write_corpus(path, n, seed):
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for _ in range(n):
            k = rng.integers(1, 5)
            fh.write(" ".join(WORDS[i] for i in rng.integers(0, len(WORDS), k)) + "\n")


os.makedirs(OUT, exist_ok=True)
run_dir = os.path.join(OUT, "run")
best = os.path.join(run_dir, "best.cgru")
if not os.path.exists(best):
    train_file = os.path.join(OUT, "train.txt")
    write_corpus(train_file, 250, seed=3)
    cfg = RunConfig(
        model=ModelConfig((8,), (24,), 8, 24, 24, 24, 24),
        training=TrainingConfig(batch_size=16, max_updates=600, validate_every=50,
                                patience=10, learning_rate=2e-3, seed=4),
        train_src=train_file, train_tgt=train_file,
        heldout_src=train_file, heldout_tgt=train_file,
        src_vocab_paths=(os.path.join(OUT, "src.vocab"),),
        tgt_vocab_path=os.path.join(OUT, "tgt.vocab"),
        out_dir=run_dir,
    )
    print("training a small model first...")
    cmd_train(cfg)

sentence = "one two three"
print(f"\nsource: {sentence!r}")

print("\nn-best list (beam 4), single model:")
for line in cmd_translate([best], [sentence], beam_size=4, nbest=4):
    print(" ", line)

print("\nensemble of the model with itself (must match the single model):")
print(" ", cmd_translate([best, best], [sentence], beam_size=4)[0])

# visualisations straight from one beam result
model = load_translation_model(best)
src_ids = factored_ids([(w,) for w in sentence.split()], model.src_vocabs)
result = beam_search(src_ids, [model], beam_size=3, max_len=10)
hyp = result.best
tgt_tokens = [model.tgt_vocab.token(t) for t in hyp.tokens]
att_tsv = emit_attention(sentence.split() + ["</s>"], tgt_tokens, np.stack(hyp.alphas))
dot = emit_search_graph(result.graph, model.tgt_vocab)

att_path = os.path.join(OUT, "attention.tsv")
dot_path = os.path.join(OUT, "search_graph.dot")
open(att_path, "w", encoding="utf-8").write(att_tsv)
open(dot_path, "w", encoding="utf-8").write(dot)
print(f"\nattention matrix ({att_path}):")
sys.stdout.write(att_tsv)
print(f"\nsearch graph written to {dot_path} "
      f"({len(result.graph.nodes)} nodes; render with `dot -Tpdf`)")

# corpus scoring and rescoring
score_src = os.path.join(OUT, "score.src")
open(score_src, "w", encoding="utf-8").write("one two\nfive six\n")
scores = cmd_score([best], score_src, score_src)
print("\nlog-probabilities of copying each line:")
for line, s in zip(["one two", "five six"], scores):
    print(f"  {s}  {line!r}")

nbest_lines = ["0 ||| one two ||| 0.0", "0 ||| two one ||| 0.0"]
print("\nrescored n-best (model score appended as a new feature):")
for line in cmd_rescore([best], nbest_lines, score_src, resort=True):
    print(" ", line)
