"""Command-line surface: train, translate, score and rescore subcommands,
plus the attention-matrix TSV and search-graph DOT emitters.

Every command exits 0 on success and nonzero on failure; diagnostics go to
stderr, data to stdout (or to the file flags). A run is reproducible from
its saved config snapshot plus seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import data, decoding, training
from .data import EOS_ID, Vocab, build_vocab, load_model, read_factored_tokens, save_model
from .decoding import TranslationModel, beam_search
from .model import ModelConfig, init_params
from .training import TrainingConfig, train_loop


class CLIError(Exception):
    """User-facing configuration or input failure; message names the field."""


@dataclass
class RunConfig:
    """Every knob of a run, JSON round-trippable."""

    model: ModelConfig
    training: TrainingConfig = field(default_factory=TrainingConfig)
    train_src: str = None
    train_tgt: str = None
    heldout_src: str = None
    heldout_tgt: str = None
    src_vocab_paths: tuple = ()
    tgt_vocab_path: str = None
    out_dir: str = "run"
    beam_size: int = 12
    length_norm: float = 1.0
    max_len_scale: float = 3.0
    max_len_offset: int = 5
    threads: int = 1
    init_scale: float = 0.08
    ortho_recurrent: bool = True
    precision: str = "float64"   # float32 trades bitwise reproducibility for speed

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["training"] = self.training.to_dict()
        d["src_vocab_paths"] = list(self.src_vocab_paths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["training"] = TrainingConfig.from_dict(d.get("training", {}))
        d["src_vocab_paths"] = tuple(d.get("src_vocab_paths", ()))
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# -- model loading -----------------------------------------------------------------


def _resolve(path, anchor_dir):
    if os.path.exists(path):
        return path
    alt = os.path.join(anchor_dir, os.path.basename(path))
    if os.path.exists(alt):
        return alt
    raise CLIError(f"vocabulary file {path!r} not found (also tried {alt!r})")


def load_translation_model(path):
    """Archive plus the vocabularies recorded in its metadata."""
    params, cfg, meta = load_model(path)
    here = os.path.dirname(os.path.abspath(path))
    vp = meta.get("vocab_paths") or {}
    src_vocabs = tgt_vocab = None
    if vp:
        src_vocabs = [Vocab.load(_resolve(p, here)) for p in vp.get("src", ())]
        tgt_vocab = Vocab.load(_resolve(vp["tgt"], here)) if vp.get("tgt") else None
    return TranslationModel(params, cfg, src_vocabs, tgt_vocab)


def _load_ensemble(paths):
    models = []
    for p in paths:
        m = load_translation_model(p)
        if m.src_vocabs is None or m.tgt_vocab is None:
            raise CLIError(f"model archive {p!r} lacks vocab_paths metadata")
        models.append(m)
    decoding.check_ensemble(models)
    return models


# -- emitters ---------------------------------------------------------------------


def emit_attention(src_tokens, tgt_tokens, alpha):
    """Attention matrix as TSV: header row of source tokens, then one row
    per target token followed by its weights. Rows must sum to 1 (1e-6)."""
    alpha = np.asarray(alpha)
    if alpha.shape != (len(tgt_tokens), len(src_tokens)):
        raise ValueError(
            f"attention shape {alpha.shape} does not match "
            f"{len(tgt_tokens)} target x {len(src_tokens)} source tokens")
    bad = np.abs(alpha.sum(axis=1) - 1.0) > 1e-6
    if bad.any():
        raise ValueError(f"attention row {int(np.argmax(bad))} does not sum to 1")
    lines = ["\t".join(src_tokens)]
    for tok, row in zip(tgt_tokens, alpha):
        lines.append(tok + "\t" + "\t".join(f"{v:.12g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_attention_tsv(text):
    """Inverse of emit_attention; returns (src_tokens, tgt_tokens, matrix)."""
    lines = [l for l in text.split("\n") if l != ""]
    src = lines[0].split("\t")
    tgt, rows = [], []
    for line in lines[1:]:
        cells = line.split("\t")
        tgt.append(cells[0])
        rows.append([float(c) for c in cells[1:]])
    return src, tgt, np.array(rows)


def _dot_quote(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def emit_search_graph(graph, tgt_vocab=None, name="beam"):
    """Search graph as DOT: node labels carry the token and cumulative
    log-probability (3 decimals), the best path is highlighted, dead-end
    (pruned) nodes are dashed gray."""
    best = graph.best_path_ids()
    kept = set()
    for node in graph.nodes:
        if node.finished or node.forced:
            walk = node
            while walk is not None:
                kept.add(walk.node_id)
                walk = walk.parent
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=box, fontsize=10];"]
    for node in graph.nodes:
        if node.parent is None:
            label = "<start>"
        else:
            tok = tgt_vocab.token(node.token) if tgt_vocab is not None else str(node.token)
            label = f"{tok}\\n{node.logprob:.3f}"
        attrs = [f"label={_dot_quote(label)}"]
        if node.finished:
            attrs.append("peripheries=2")
        if node.node_id in best:
            attrs.append("color=red")
            attrs.append("penwidth=2")
        elif node.node_id not in kept:
            attrs.append("style=dashed")
            attrs.append("color=gray")
        lines.append(f"  n{node.node_id} [{', '.join(attrs)}];")
    for node in graph.nodes:
        if node.parent is None:
            continue
        style = ""
        if node.node_id in best and node.parent.node_id in best:
            style = " [color=red, penwidth=2]"
        lines.append(f"  n{node.parent.node_id} -> n{node.node_id}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- subcommands --------------------------------------------------------------------


def _require(cfg, **fields):
    for name, value in fields.items():
        if not value:
            raise CLIError(f"config field {name!r} is required")


def _load_or_build_vocab(path, token_lists, max_size):
    if os.path.exists(path):
        return Vocab.load(path)
    v = build_vocab(token_lists, max_size)
    v.save(path)
    return v


def cmd_train(run_cfg, log=None):
    """Train per config; returns the TrainResult. Writes a config snapshot,
    improvement checkpoints, best.cgru and final.cgru into out_dir."""
    _require(run_cfg, train_src=run_cfg.train_src, train_tgt=run_cfg.train_tgt,
             tgt_vocab_path=run_cfg.tgt_vocab_path)
    mcfg = run_cfg.model
    if len(run_cfg.src_vocab_paths) != mcfg.num_factors:
        raise CLIError("config field 'src_vocab_paths' must name one file per factor")
    for p in (run_cfg.train_src, run_cfg.train_tgt):
        if not os.path.exists(p):
            raise CLIError(f"corpus file {p!r} does not exist")

    src_tok = read_factored_tokens(run_cfg.train_src, mcfg.num_factors)
    src_vocabs = []
    for f, path in enumerate(run_cfg.src_vocab_paths):
        col = [[tup[f] for tup in sent] for sent in src_tok]
        src_vocabs.append(_load_or_build_vocab(path, col, mcfg.src_vocab_sizes[f]))
    tgt_tok = read_factored_tokens(run_cfg.train_tgt, 1)
    tgt_vocab = _load_or_build_vocab(run_cfg.tgt_vocab_path,
                                     [[t[0] for t in s] for s in tgt_tok],
                                     mcfg.tgt_vocab_size)

    # embedding tables must match the vocabularies actually built
    mcfg = replace(mcfg, src_vocab_sizes=tuple(len(v) for v in src_vocabs),
                   tgt_vocab_size=len(tgt_vocab))
    run_cfg = replace(run_cfg, model=mcfg)

    train_pairs = data.read_parallel(run_cfg.train_src, run_cfg.train_tgt,
                                     src_vocabs, tgt_vocab)
    heldout = []
    if run_cfg.heldout_src and run_cfg.heldout_tgt:
        heldout = data.read_parallel(run_cfg.heldout_src, run_cfg.heldout_tgt,
                                     src_vocabs, tgt_vocab)

    os.makedirs(run_cfg.out_dir, exist_ok=True)
    run_cfg.save(os.path.join(run_cfg.out_dir, "config.json"))
    if run_cfg.precision not in ("float64", "float32"):
        raise CLIError("config field 'precision' must be float64 or float32")
    dtype = np.dtype(run_cfg.precision)
    rng = np.random.default_rng(run_cfg.training.seed)
    params = init_params(mcfg, rng, scale=run_cfg.init_scale,
                         ortho_recurrent=run_cfg.ortho_recurrent, dtype=dtype)
    result = train_loop(train_pairs, heldout, params, mcfg, run_cfg.training,
                        checkpoint_dir=run_cfg.out_dir, log=log, dtype=dtype)
    vocab_meta = {"vocab_paths": {"src": list(run_cfg.src_vocab_paths),
                                  "tgt": run_cfg.tgt_vocab_path}}
    save_model(os.path.join(run_cfg.out_dir, "final.cgru"), result.params, mcfg,
               extra_meta={**vocab_meta, "training": run_cfg.training.to_dict()})
    save_model(os.path.join(run_cfg.out_dir, "best.cgru"), result.best_params, mcfg,
               extra_meta={**vocab_meta, "training": run_cfg.training.to_dict()})
    return result


def _decode_line(models, line, beam_size, length_norm, max_len_scale, max_len_offset):
    toks = [data.split_factors(t, models[0].cfg.num_factors) for t in line.split()]
    if not toks:
        return None
    src = data.factored_ids(toks, models[0].src_vocabs)
    max_len = max(1, int(max_len_scale * src.shape[0] + max_len_offset))
    return beam_search(src, models, beam_size, max_len, length_norm)


def cmd_translate(model_paths, input_lines, beam_size=12, length_norm=1.0,
                  nbest=0, attention_out=None, graph_out=None, threads=1,
                  max_len_scale=3.0, max_len_offset=5):
    """Decode input lines; returns output lines. With nbest > 0 the output
    switches to `sent_id ||| tokens ||| logprob` blocks."""
    models = _load_ensemble(model_paths)
    vocab = models[0].tgt_vocab
    lines = list(input_lines)

    def work(line):
        return _decode_line(models, line, beam_size, length_norm,
                            max_len_scale, max_len_offset)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, lines))
    else:
        results = [work(line) for line in lines]

    out_lines, att_blocks, dot_blocks = [], [], []
    for i, res in enumerate(results):
        if res is None:
            out_lines.append(f"{i} |||  ||| 0.000000" if nbest > 0 else "")
            continue
        best = res.best
        words = [vocab.token(t) for t in best.output_tokens()]
        if res.forced:
            print(f"warning: sentence {i}: no hypothesis finished within "
                  f"the length limit", file=sys.stderr)
        if nbest > 0:
            for hyp in res.hypotheses[:nbest]:
                hyp_words = " ".join(vocab.token(t) for t in hyp.output_tokens())
                out_lines.append(f"{i} ||| {hyp_words} ||| {hyp.logprob:.6f}")
        else:
            out_lines.append(" ".join(words))
        if attention_out is not None:
            src_tokens = lines[i].split() + [data.EOS_TOKEN]
            tgt_tokens = words + [data.EOS_TOKEN] if best.tokens[-1] == EOS_ID else words
            att_blocks.append(emit_attention(src_tokens, tgt_tokens,
                                             np.stack(best.alphas)))
        if graph_out is not None:
            dot_blocks.append(emit_search_graph(res.graph, vocab, name=f"beam_{i}"))
    if attention_out is not None:
        with open(attention_out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(att_blocks))
    if graph_out is not None:
        with open(graph_out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(dot_blocks))
    return out_lines


def cmd_score(model_paths, src_path, tgt_path, per_token=False):
    """Score an aligned corpus; returns one line per sentence pair."""
    models = _load_ensemble(model_paths)
    pairs = data.read_parallel(src_path, tgt_path, models[0].src_vocabs,
                               models[0].tgt_vocab)
    if per_token:
        scores, rows = decoding.score_corpus(pairs, models, per_token=True)
        return [f"{s:.6f}\t" + " ".join(f"{v:.6f}" for v in r)
                for s, r in zip(scores, rows)]
    return [f"{s:.6f}" for s in decoding.score_corpus(pairs, models)]


def cmd_rescore(model_paths, nbest_lines, src_path, resort=False):
    """Append one model-score feature per ensemble member to an n-best list."""
    models = _load_ensemble(model_paths)
    sources = data.read_factored_corpus(src_path, models[0].src_vocabs)
    return decoding.rescore_nbest(nbest_lines, models, sources, resort=resort)


# -- argument parsing ---------------------------------------------------------------


def _build_parser():
    p = argparse.ArgumentParser(prog="cgru",
                                description="gated attentional translation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--patience", type=int, default=None)
    t.add_argument("--objective", choices=["ce", "mrt"], default=None)
    t.add_argument("--optimizer", choices=["sgd", "adadelta", "rmsprop", "adam"],
                   default=None)
    t.add_argument("--out-dir", default=None)

    d = sub.add_parser("translate", help="decode with one model or an ensemble")
    d.add_argument("--models", action="append", required=True,
                   help="model archive (repeat for an ensemble)")
    d.add_argument("--config", default=None, help="run config with decode defaults")
    d.add_argument("--input", default=None, help="source file (default stdin)")
    d.add_argument("--output", default=None, help="output file (default stdout)")
    d.add_argument("--beam-size", type=int, default=None)
    d.add_argument("--length-norm", type=float, default=None)
    d.add_argument("--nbest", type=int, default=0, help="emit an n-best list this deep")
    d.add_argument("--attention-out", default=None, help="attention TSV file")
    d.add_argument("--graph-out", default=None, help="search graph DOT file")
    d.add_argument("--threads", type=int, default=None)
    d.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("score", help="score an aligned parallel corpus")
    s.add_argument("--models", action="append", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--output", default=None)
    s.add_argument("--per-token", action="store_true")

    r = sub.add_parser("rescore", help="add model scores to an n-best list")
    r.add_argument("nbest", help="n-best file (`id ||| tokens ||| features`)")
    r.add_argument("--models", action="append", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--resort", action="store_true")
    r.add_argument("--output", default=None)
    return p


def _write_lines(lines, path):
    text = "".join(line + "\n" for line in lines)
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            run_cfg = RunConfig.load(args.config)
            tr = run_cfg.training
            if args.seed is not None:
                tr = replace(tr, seed=args.seed)
            if args.patience is not None:
                tr = replace(tr, patience=args.patience)
            if args.objective is not None:
                tr = replace(tr, objective=args.objective)
            if args.optimizer is not None:
                tr = replace(tr, optimizer=args.optimizer)
            run_cfg = replace(run_cfg, training=tr)
            if args.out_dir is not None:
                run_cfg = replace(run_cfg, out_dir=args.out_dir)
            cmd_train(run_cfg, log=sys.stdout)
        elif args.command == "translate":
            defaults = RunConfig.load(args.config) if args.config else None
            beam = args.beam_size if args.beam_size is not None else \
                (defaults.beam_size if defaults else 12)
            norm = args.length_norm if args.length_norm is not None else \
                (defaults.length_norm if defaults else 1.0)
            threads = args.threads if args.threads is not None else \
                (defaults.threads if defaults else 1)
            if args.input is None:
                lines = [l.rstrip("\n") for l in sys.stdin]
            else:
                with open(args.input, encoding="utf-8") as fh:
                    lines = [l.rstrip("\n") for l in fh]
            out = cmd_translate(args.models, lines, beam_size=beam,
                                length_norm=norm, nbest=args.nbest,
                                attention_out=args.attention_out,
                                graph_out=args.graph_out, threads=threads)
            _write_lines(out, args.output)
        elif args.command == "score":
            out = cmd_score(args.models, args.source, args.target,
                            per_token=args.per_token)
            _write_lines(out, args.output)
        elif args.command == "rescore":
            with open(args.nbest, encoding="utf-8") as fh:
                nbest_lines = [l.rstrip("\n") for l in fh]
            out = cmd_rescore(args.models, nbest_lines, args.source,
                              resort=args.resort)
            _write_lines(out, args.output)
        return 0
    except (CLIError, data.DataError, decoding.EnsembleError,
            decoding.NBestFormatError, training.TrainingError, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
