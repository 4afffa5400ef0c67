"""Beam search, ensemble arithmetic, scoring and rescoring tests."""

import numpy as np
import pytest

from cgru import decoding
from cgru.data import EOS_ID, Vocab, build_vocab
from cgru.decoding import (
    EnsembleError,
    NBestFormatError,
    TranslationModel,
    advance,
    beam_search,
    combine_logdists,
    ensemble_step_dist,
    rescore_nbest,
    score_corpus,
    start_states,
)
from cgru.model import ModelConfig, forward_logprobs, param_shapes


def tiny_model(seed, V=5, d=4, scale=0.5):
    cfg = ModelConfig((V,), (d,), V, d, d, d, d)
    rng = np.random.default_rng(seed)
    params = {k: rng.uniform(-scale, scale, size=s) for k, s in param_shapes(cfg).items()}
    return TranslationModel(params, cfg)


def test_geometric_average_hand_case():
    p = combine_logdists([np.log([0.9, 0.1]), np.log([0.5, 0.5])])
    assert np.allclose(np.exp(p), [0.75, 0.25], atol=1e-12)


def test_single_member_distribution_unchanged():
    lp = np.log([0.7, 0.2, 0.1])
    assert np.array_equal(combine_logdists([lp]), lp)


def test_identical_members_leave_distribution_unchanged():
    lp = np.log([0.6, 0.3, 0.1])
    assert np.allclose(combine_logdists([lp, lp]), lp, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_combined_distribution_normalizes_and_ignores_order(seed):
    rng = np.random.default_rng(seed)
    lps = [np.log(rng.dirichlet(np.ones(6))) for _ in range(3)]
    p = np.exp(combine_logdists(lps))
    q = np.exp(combine_logdists(lps[::-1]))
    assert abs(p.sum() - 1.0) < 1e-6
    assert np.allclose(p, q, atol=1e-12)


def test_ensemble_step_dist_matches_members():
    m = tiny_model(0)
    src = np.array([[1], [2]])
    states = start_states([m], src)
    p = ensemble_step_dist([m], states, None)
    assert abs(p.sum() - 1.0) < 1e-9
    p2 = ensemble_step_dist([m, m], start_states([m, m], src), None)
    assert np.allclose(p, p2, atol=1e-12)


def test_vocab_size_mismatch_rejected():
    with pytest.raises(EnsembleError, match="vocabulary"):
        decoding.check_ensemble([tiny_model(0, V=5), tiny_model(1, V=6)])


def test_vocab_content_mismatch_rejected():
    a = tiny_model(0)
    b = tiny_model(1)
    a.tgt_vocab = build_vocab([["x", "y", "z"]], 5)
    b.tgt_vocab = build_vocab([["x", "q", "z"]], 5)
    with pytest.raises(EnsembleError):
        decoding.check_ensemble([a, b])


# -- beam search -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_beam_of_one_is_greedy(seed):
    m = tiny_model(seed)
    src = np.random.default_rng(seed).integers(m.cfg.src_vocab_sizes[0], size=(3, 1))
    res = beam_search(src, [m], 1, 8)
    states = start_states([m], src)
    toks, prev = [], None
    for _ in range(8):
        lp, states, _ = advance([m], states, prev)
        prev = int(np.argmax(lp))
        toks.append(prev)
        if prev == EOS_ID:
            break
    assert list(res.best.tokens) == toks


def test_immediate_eos_gives_empty_translation():
    m = tiny_model(2)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    m.params["out_bo"][EOS_ID] = 400.0  # probability 1 after normalization
    res = beam_search(np.array([[1]]), [m], 3, 5)
    assert res.best.output_tokens() == []
    assert res.best.tokens == (EOS_ID,)
    assert res.best.logprob == 0.0
    assert not res.forced


def test_forced_termination_sets_warning_flag():
    m = tiny_model(3)
    m.params["out_bo"][EOS_ID] = -400.0  # never finishes
    res = beam_search(np.array([[1], [2]]), [m], 2, 4)
    assert res.forced
    assert all(h.forced and not h.finished for h in res.hypotheses)
    assert len(res.best.tokens) == 4


def test_beam_rejects_bad_width():
    m = tiny_model(4)
    with pytest.raises(ValueError):
        beam_search(np.array([[1]]), [m], 0, 4)


def enumerate_best(models, src, max_len):
    """Exhaustive search over all end-marked sequences up to max_len steps."""
    V = models[0].cfg.tgt_vocab_size
    best = (None, -np.inf)

    def extend(prefix, logprob, states, y_prev, steps_left):
        nonlocal best
        lp, new_states, _ = advance(models, states, y_prev)
        stop = logprob + lp[EOS_ID]
        if stop > best[1]:
            best = (prefix + (EOS_ID,), stop)
        if steps_left > 1:
            for tok in range(V):
                if tok == EOS_ID:
                    continue
                extend(prefix + (tok,), logprob + lp[tok], new_states, tok, steps_left - 1)

    extend((), 0.0, start_states(models, src), None, max_len)
    return best


@pytest.mark.parametrize("seed", range(4))
def test_beam_with_huge_width_matches_enumeration(seed):
    m = tiny_model(seed, V=3, scale=1.0)
    src = np.random.default_rng(seed).integers(3, size=(2, 1))
    want_seq, want_lp = enumerate_best([m], src, 4)
    res = beam_search(src, [m], 81, 4, length_norm_beta=0.0)
    assert res.best.tokens == want_seq
    assert abs(res.best.logprob - want_lp) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_hypothesis_logprobs_never_increase(seed):
    m = tiny_model(seed + 10)
    src = np.random.default_rng(seed).integers(m.cfg.src_vocab_sizes[0], size=(4, 1))
    res = beam_search(src, [m], 4, 6)
    for h in res.graph.nodes[1:]:
        assert h.logprob <= h.parent.logprob + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_search_graph_well_formed(seed):
    m = tiny_model(seed + 20)
    src = np.random.default_rng(seed).integers(m.cfg.src_vocab_sizes[0], size=(3, 1))
    k, max_len = 3, 6
    res = beam_search(src, [m], k, max_len)
    g = res.graph
    roots = [n for n in g.nodes if n.parent is None]
    assert len(roots) == 1 and roots[0].node_id == 0
    assert len(g.nodes) <= 1 + k * max_len
    per_step = {}
    for n in g.nodes[1:]:
        assert n.parent in g.nodes
        per_step[n.step] = per_step.get(n.step, 0) + 1
        # edge labels reconstruct the hypothesis string
        walked, node = [], n
        while node.parent is not None:
            walked.append(node.token)
            node = node.parent
        assert tuple(reversed(walked)) == n.tokens
    assert all(c <= k for c in per_step.values())


def test_ensemble_members_may_differ_in_dimensions():
    a = tiny_model(60, V=5, d=4)
    b_cfg = ModelConfig((5,), (3,), 5, 6, 7, 5, 3)  # same vocab, other dims
    rng = np.random.default_rng(61)
    b = TranslationModel(
        {k: rng.uniform(-0.5, 0.5, size=s) for k, s in param_shapes(b_cfg).items()},
        b_cfg)
    res = beam_search(np.array([[1], [2]]), [a, b], 2, 6)
    assert res.hypotheses
    p = ensemble_step_dist([a, b], start_states([a, b], np.array([[1]])), None)
    assert abs(p.sum() - 1.0) < 1e-9


def test_ensemble_of_identical_models_decodes_identically():
    m = tiny_model(31)
    src = np.array([[1], [3], [2]])
    single = beam_search(src, [m], 3, 8).best.tokens
    for copies in (1, 2, 3):
        ens = beam_search(src, [m] * copies, 3, 8).best.tokens
        assert ens == single


# -- scoring ---------------------------------------------------------------------


def test_single_model_score_is_sum_of_logprobs():
    m = tiny_model(40)
    src = np.array([[1], [2]])
    tgt = np.array([3, 1, EOS_ID])
    (score,) = score_corpus([(src, tgt)], [m])
    want = forward_logprobs(m.params, m.cfg, src, tgt).sum()
    assert abs(score - want) < 1e-12


def test_duplicated_pair_scores_identically():
    m = tiny_model(41)
    pair = (np.array([[2], [0]]), np.array([1, EOS_ID]))
    scores = score_corpus([pair, pair], [m])
    assert scores[0] == scores[1]


def test_zero_weight_model_scores_uniform():
    m = tiny_model(42, V=7)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    tgt = np.array([2, 4, EOS_ID])
    (score,) = score_corpus([(np.array([[1]]), tgt)], [m])
    assert abs(score - (-3 * np.log(7.0))) < 1e-12


def test_per_token_breakdown():
    m = tiny_model(43)
    src = np.array([[1]])
    tgt = np.array([2, EOS_ID])
    scores, rows = score_corpus([(src, tgt)], [m], per_token=True)
    assert rows[0].shape == (2,)
    assert abs(scores[0] - rows[0].sum()) < 1e-12


# -- rescoring ---------------------------------------------------------------------


def _vocab_model(seed):
    m = tiny_model(seed)
    m.tgt_vocab = Vocab(["a", "b", "c"])  # ids 2, 3, 4
    m.src_vocabs = [m.tgt_vocab]
    return m


def test_rescore_appends_matching_score():
    m = _vocab_model(50)
    src = np.array([[2], [3]])
    lines = ["0 ||| a b ||| 0.5"]
    out = rescore_nbest(lines, [m], [src])
    assert len(out) == 1
    appended = float(out[0].split(" ||| ")[2].split()[-1])
    tgt = m.tgt_vocab.encode(["a", "b"])
    want = score_corpus([(src, tgt)], [m])[0]
    assert abs(appended - want) < 5e-7  # printed with six decimals


def test_rescore_empty_input():
    assert rescore_nbest([], [_vocab_model(51)], []) == []


def test_rescore_two_models_two_features_in_order():
    a, b = _vocab_model(52), _vocab_model(53)
    src = np.array([[2]])
    out = rescore_nbest(["0 ||| a ||| "], [a, b], [src])
    feats = out[0].split(" ||| ")[2].split()
    assert len(feats) == 2
    sa = score_corpus([(src, a.tgt_vocab.encode(["a"]))], [a])[0]
    sb = score_corpus([(src, b.tgt_vocab.encode(["a"]))], [b])[0]
    assert abs(float(feats[0]) - sa) < 5e-7
    assert abs(float(feats[1]) - sb) < 5e-7


def test_rescore_malformed_line_names_number():
    m = _vocab_model(54)
    with pytest.raises(NBestFormatError, match="line 2"):
        rescore_nbest(["0 ||| a ||| ", "garbage"], [m], [np.array([[2]])])


def test_rescore_bad_sentence_id():
    m = _vocab_model(55)
    with pytest.raises(NBestFormatError, match="out of range"):
        rescore_nbest(["7 ||| a ||| "], [m], [np.array([[2]])])


def test_rescore_resort_orders_by_model_score():
    m = _vocab_model(56)
    src = np.array([[2], [4]])
    lines = ["0 ||| a b ||| x", "0 ||| c ||| y", "0 ||| b a ||| z"]
    out = rescore_nbest(lines, [m], [src], resort=True)
    scores = [float(l.split(" ||| ")[2].split()[-1]) for l in out]
    assert scores == sorted(scores, reverse=True)
    assert sorted(out) == sorted(rescore_nbest(lines, [m], [src]))
