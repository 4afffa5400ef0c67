"""CLI surface tests; the DOT output is checked by an external grammar."""

import json
import os
import re

import numpy as np
import pyparsing as pp
import pytest

from cgru import cli, decoding
from cgru.cli import (
    RunConfig,
    cmd_rescore,
    cmd_score,
    cmd_train,
    cmd_translate,
    emit_attention,
    emit_search_graph,
    load_translation_model,
    main,
    parse_attention_tsv,
)
from cgru.data import EOS_ID
from cgru.decoding import TranslationModel, beam_search
from cgru.model import ModelConfig, param_shapes
from cgru.training import TrainingConfig

LETTERS = ["aa", "bb", "cc", "dd", "ee"]


def write_copy_corpus(path, n, seed, lo=1, hi=4):
    rng = np.random.default_rng(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for _ in range(n):
            toks = [LETTERS[i] for i in rng.integers(0, len(LETTERS), rng.integers(lo, hi + 1))]
            fh.write(" ".join(toks) + "\n")


def make_run_config(root, seed=5, max_updates=30, n_sentences=40):
    src = os.path.join(root, "train.src")
    write_copy_corpus(src, n_sentences, seed)
    mcfg = ModelConfig((10,), (24,), 10, 24, 24, 24, 24)
    tcfg = TrainingConfig(batch_size=8, max_updates=max_updates, validate_every=50,
                          patience=100, learning_rate=5e-3, seed=seed)
    return RunConfig(
        model=mcfg, training=tcfg,
        train_src=src, train_tgt=src,
        heldout_src=src, heldout_tgt=src,
        src_vocab_paths=(os.path.join(root, "src.vocab"),),
        tgt_vocab_path=os.path.join(root, "tgt.vocab"),
        out_dir=os.path.join(root, "run"),
    )


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    # trained to convergence on the tiny copy task; several tests below
    # rely on the decodes being actual copies
    root = str(tmp_path_factory.mktemp("cli"))
    run_cfg = make_run_config(root, max_updates=600, n_sentences=120)
    result = cmd_train(run_cfg)
    return root, run_cfg, result


# -- attention TSV ------------------------------------------------------------------


def test_attention_single_source_position():
    out = emit_attention(["hallo"], ["x", "y"], np.array([[1.0], [1.0]]))
    lines = out.strip().split("\n")
    assert lines[0] == "hallo"
    assert lines[1] == "x\t1"
    assert lines[2] == "y\t1"


def test_attention_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        emit_attention(["a", "b"], ["x"], np.ones((1, 3)))


def test_attention_row_sum_enforced():
    with pytest.raises(ValueError, match="sum"):
        emit_attention(["a", "b"], ["x"], np.array([[0.6, 0.6]]))


@pytest.mark.parametrize("seed", range(5))
def test_attention_roundtrip_nine_significant_digits(seed):
    rng = np.random.default_rng(seed)
    raw = rng.random((3, 4))
    alpha = raw / raw.sum(axis=1, keepdims=True)
    src = ["s1", "s2", "s3", "s4"]
    tgt = ["t1", "t2", "t3"]
    text = emit_attention(src, tgt, alpha)
    src2, tgt2, back = parse_attention_tsv(text)
    assert src2 == src and tgt2 == tgt
    assert np.max(np.abs(back - alpha) / np.abs(alpha)) < 1e-9


# -- search graph DOT -----------------------------------------------------------------


def dot_grammar():
    ident = pp.Word(pp.alphas + "_", pp.alphanums + "_")
    number = pp.Regex(r"-?\d+(\.\d+)?")
    quoted = pp.QuotedString('"', esc_char="\\")
    name = quoted | ident | number
    attr = pp.Group(name + pp.Suppress("=") + name)
    attr_list = pp.Suppress("[") + pp.Optional(pp.DelimitedList(attr)) + pp.Suppress("]")
    edge = pp.Group(name + pp.OneOrMore(pp.Suppress("->") + name) + pp.Optional(attr_list))
    node = pp.Group(name + pp.Optional(attr_list))
    setting = pp.Group(name + pp.Suppress("=") + name)
    stmt = (edge | setting | node) + pp.Suppress(pp.Optional(";"))
    graph = (pp.Suppress(pp.Keyword("digraph")) + pp.Optional(name)
             + pp.Suppress("{") + pp.ZeroOrMore(stmt) + pp.Suppress("}"))
    return pp.OneOrMore(pp.Group(graph))


def zero_model(V=5, d=4, eos_logit=400.0):
    cfg = ModelConfig((V,), (d,), V, d, d, d, d)
    params = {k: np.zeros(s) for k, s in param_shapes(cfg).items()}
    params["out_bo"][EOS_ID] = eos_logit
    return TranslationModel(params, cfg)


def test_empty_translation_graph_is_root_plus_one():
    res = beam_search(np.array([[1]]), [zero_model()], 1, 5)
    assert res.best.output_tokens() == []
    dot = emit_search_graph(res.graph)
    node_lines = [l for l in dot.split("\n")
                  if re.match(r"\s*n\d+ \[", l) and "->" not in l]
    assert len(node_lines) == 2  # root and the end-marker node
    dot_grammar().parse_string(dot, parse_all=True)


def test_graph_node_count_bound_and_grammar(trained):
    root, run_cfg, _ = trained
    m = load_translation_model(os.path.join(run_cfg.out_dir, "best.cgru"))
    src = np.array([[2], [3], [4], [0]])
    k, max_len = 3, 7
    res = beam_search(src, [m], k, max_len)
    assert len(res.graph.nodes) <= 1 + k * max_len
    dot = emit_search_graph(res.graph, m.tgt_vocab)
    parsed = dot_grammar().parse_string(dot, parse_all=True)
    assert len(parsed) == 1
    assert "color=red" in dot  # highlighted best path


def test_multi_sentence_graph_file_parses(trained, tmp_path):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    graph_file = tmp_path / "graphs.dot"
    out = cmd_translate([best], ["aa bb", "cc"], beam_size=3,
                        graph_out=str(graph_file))
    assert len(out) == 2
    parsed = dot_grammar().parse_string(graph_file.read_text(), parse_all=True)
    assert len(parsed) == 2


# -- train --------------------------------------------------------------------------


def test_train_writes_snapshot_and_checkpoints(trained):
    root, run_cfg, result = trained
    out = run_cfg.out_dir
    assert os.path.exists(os.path.join(out, "config.json"))
    assert os.path.exists(os.path.join(out, "best.cgru"))
    assert os.path.exists(os.path.join(out, "final.cgru"))
    with open(os.path.join(out, "config.json"), encoding="utf-8") as fh:
        snap = json.load(fh)
    rc = RunConfig.from_dict(snap)
    assert rc.training.seed == run_cfg.training.seed
    assert rc.model.tgt_vocab_size == 7  # 5 letters + 2 reserved ids
    assert result.updates == run_cfg.training.max_updates


def test_missing_corpus_path_is_usage_error(tmp_path, capsys):
    cfg = make_run_config(str(tmp_path))
    cfg = cfg.__class__.from_dict(cfg.to_dict())  # deep copy
    os.unlink(cfg.train_src)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    rc = main(["train", "--config", str(path)])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_train_via_main_logs_updates(tmp_path, capsys):
    cfg = make_run_config(str(tmp_path), max_updates=3)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    rc = main(["train", "--config", str(path), "--seed", "7"])
    assert rc == 0
    out = capsys.readouterr().out.strip().split("\n")
    assert len(out) == 3
    assert out[0].split("\t")[0] == "1"
    snap = json.load(open(tmp_path / "run" / "config.json", encoding="utf-8"))
    assert snap["training"]["seed"] == 7  # flag overrides config


# -- translate ----------------------------------------------------------------------


def test_translate_single_equals_self_ensemble(trained):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    lines = ["aa bb cc", "dd"]
    one = cmd_translate([best], lines, beam_size=3)
    three = cmd_translate([best, best, best], lines, beam_size=3)
    assert one == three


def test_translate_beam_one_is_greedy(trained):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    m = load_translation_model(best)
    line = "aa bb"
    (out,) = cmd_translate([best], [line], beam_size=1)
    src = m.src_vocabs[0].encode(line.split())[:, None]
    toks = decoding.greedy_decode([m], src, max_len=3 * 3 + 5)
    assert out == " ".join(m.tgt_vocab.token(t) for t in toks)


def test_translate_threads_preserve_order(trained):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    lines = ["aa bb cc", "dd", "ee aa", "bb"]
    seq = cmd_translate([best], lines, beam_size=2)
    par = cmd_translate([best], lines, beam_size=2, threads=3)
    assert seq == par


def test_translate_nbest_format(trained):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    out = cmd_translate([best], ["aa bb"], beam_size=3, nbest=3)
    assert 1 <= len(out) <= 3
    for line in out:
        sid, hyp, score = line.split(" ||| ")
        assert sid == "0"
        float(score)


def test_translate_attention_rows_sum_to_one(trained, tmp_path):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    att = tmp_path / "att.tsv"
    cmd_translate([best], ["aa bb cc"], beam_size=2, attention_out=str(att))
    src, tgt, alpha = parse_attention_tsv(att.read_text())
    assert src == ["aa", "bb", "cc", "</s>"]
    assert alpha.shape[1] == 4
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-6)


def test_translate_via_main(trained, tmp_path, capsys):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    inp = tmp_path / "in.txt"
    inp.write_text("aa bb\ncc dd\n", encoding="utf-8")
    rc = main(["translate", "--models", best, "--input", str(inp),
               "--beam-size", "2", "--length-norm", "0.5"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("\n") == 2  # one output line per input line


# -- score / rescore -----------------------------------------------------------------


def test_score_one_line_per_pair(trained, tmp_path):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    src = tmp_path / "s.txt"
    tgt = tmp_path / "t.txt"
    src.write_text("aa bb\ncc\n", encoding="utf-8")
    tgt.write_text("aa bb\ncc\n", encoding="utf-8")
    out = cmd_score([best], str(src), str(tgt))
    assert len(out) == 2
    assert all(float(s) <= 0 for s in out)


def test_score_empty_files_empty_output(trained, tmp_path):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    src = tmp_path / "s.txt"
    tgt = tmp_path / "t.txt"
    src.write_text("", encoding="utf-8")
    tgt.write_text("", encoding="utf-8")
    assert cmd_score([best], str(src), str(tgt)) == []


def test_score_mismatched_files_exit_nonzero(trained, tmp_path, capsys):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    src = tmp_path / "s.txt"
    tgt = tmp_path / "t.txt"
    src.write_text("aa\nbb\n", encoding="utf-8")
    tgt.write_text("aa\n", encoding="utf-8")
    rc = main(["score", "--models", best, "--source", str(src), "--target", str(tgt)])
    assert rc == 1
    assert "line 2" in capsys.readouterr().err


def test_score_per_token_breakdown(trained, tmp_path):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    src = tmp_path / "s.txt"
    src.write_text("aa bb\n", encoding="utf-8")
    (line,) = cmd_score([best], str(src), str(src), per_token=True)
    total, rest = line.split("\t")
    parts = [float(x) for x in rest.split()]
    assert len(parts) == 3  # two tokens plus the end marker
    assert abs(sum(parts) - float(total)) < 2e-6


def test_score_prefers_own_greedy_output_over_perturbations(trained, tmp_path):
    # for a converged copy model, the greedy output outscores every
    # single-token corruption of it
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    source = "aa bb cc dd"
    (greedy,) = cmd_translate([best], [source], beam_size=1)
    assert greedy == source  # converged on the copy task
    toks = greedy.split()
    variants = []
    for i in range(len(toks)):
        for repl in LETTERS:
            if repl != toks[i]:
                variants.append(" ".join(toks[:i] + [repl] + toks[i + 1:]))
    src_f = tmp_path / "src.txt"
    tgt_f = tmp_path / "tgt.txt"
    src_f.write_text((source + "\n") * (1 + len(variants)), encoding="utf-8")
    tgt_f.write_text("\n".join([greedy] + variants) + "\n", encoding="utf-8")
    scores = [float(s) for s in cmd_score([best], str(src_f), str(tgt_f))]
    assert all(scores[0] >= s for s in scores[1:])


def test_rescore_appends_score_of_gold(trained, tmp_path):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    src = tmp_path / "s.txt"
    src.write_text("aa bb\n", encoding="utf-8")
    out = cmd_rescore([best], ["0 ||| aa bb ||| 0.1"], str(src))
    appended = float(out[0].split(" ||| ")[2].split()[-1])
    (score,) = cmd_score([best], str(src), str(src))
    assert abs(appended - float(score)) < 5e-7


def test_rescore_malformed_line_number(trained, tmp_path, capsys):
    root, run_cfg, _ = trained
    best = os.path.join(run_cfg.out_dir, "best.cgru")
    src = tmp_path / "s.txt"
    src.write_text("aa\n", encoding="utf-8")
    nbest = tmp_path / "n.txt"
    nbest.write_text("0 ||| aa ||| 0\nbroken line\n", encoding="utf-8")
    rc = main(["rescore", str(nbest), "--models", best, "--source", str(src)])
    assert rc == 1
    assert "line 2" in capsys.readouterr().err


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["translate"])
    assert e.value.code != 0
