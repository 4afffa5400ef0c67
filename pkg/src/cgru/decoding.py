"""Beam-search decoding, ensembles, corpus scoring and n-best rescoring.

An ensemble is an ordered list of models sharing one output vocabulary
(dimensions may differ). At every step the combined distribution is the
geometric average of the member distributions, computed in log space as
the mean of log-probabilities followed by a log-softmax renormalization.
Corpus scoring combines members as the plain mean of their sentence
log-probabilities.

Beam search keeps the top-k live hypotheses by cumulative log-probability,
moves finished ones (those that just emitted the end marker) to a
completed pool, and finally ranks by logprob / length**beta where length
counts the end marker. Every selected node, pruned or not, stays in the
search graph for visualization. Sentences decode independently and may be
processed in parallel over shared read-only models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import EOS_ID
from .model import PairGraphCache, forward_logprobs
from .tape import log_softmax


class EnsembleError(ValueError):
    """Ensemble members disagree on the output vocabulary."""


class NBestFormatError(ValueError):
    """Malformed n-best line; message names the line number."""


@dataclass
class TranslationModel:
    """Parameters plus config, optionally with the vocabularies attached."""

    params: dict
    cfg: M.ModelConfig
    src_vocabs: list = None
    tgt_vocab: object = None


def check_ensemble(models):
    if not models:
        raise EnsembleError("ensemble needs at least one model")
    v = models[0].cfg.tgt_vocab_size
    for i, m in enumerate(models[1:], 2):
        if m.cfg.tgt_vocab_size != v:
            raise EnsembleError(
                f"model {i} has output vocabulary size {m.cfg.tgt_vocab_size}, expected {v}")
    vocabs = [m.tgt_vocab for m in models if m.tgt_vocab is not None]
    for w in vocabs[1:]:
        if w != vocabs[0]:
            raise EnsembleError("ensemble members have different output vocabularies")


@dataclass
class _DecodeState:
    """Per-model incremental state: annotations, their attention projection,
    and the current hidden state."""

    C: np.ndarray
    K: np.ndarray
    s: np.ndarray


def start_states(models, src_factor_ids):
    states = []
    for m in models:
        C = M.encode(m.params, m.cfg, M.embed_source(m.params, src_factor_ids))
        K = C @ m.params["att_W"]
        states.append(_DecodeState(C, K, M.init_decoder(m.params, C)))
    return states


def combine_logdists(logdists):
    """Geometric-average combination: mean of log-probs, renormalized."""
    if len(logdists) == 1:
        return logdists[0]
    return log_softmax(np.mean(logdists, axis=0), axis=-1)


def advance(models, states, y_prev):
    """One lockstep step: returns (combined logprobs (V,), new states, mean alpha)."""
    lps, new_states, alphas = [], [], []
    for m, st in zip(models, states):
        s2, c, a = M.cgru_step(m.params, m.cfg, y_prev, st.s, st.C, K=st.K)
        lps.append(M.deep_output(m.params, m.cfg, s2, y_prev, c))
        new_states.append(_DecodeState(st.C, st.K, s2))
        alphas.append(a)
    return combine_logdists(lps), new_states, np.mean(alphas, axis=0)


def ensemble_step_dist(models, states, y_prev):
    """Next-token probability vector of the ensemble (states untouched)."""
    check_ensemble(models)
    lp, _, _ = advance(models, states, y_prev)
    return np.exp(lp)


@dataclass
class Hypothesis:
    """Beam node: token prefix, cumulative log-probability, attention rows,
    and the parent link that makes the search graph reconstructible."""

    tokens: tuple
    logprob: float
    alphas: list
    parent: "Hypothesis | None"
    token: int | None
    finished: bool
    step: int
    node_id: int
    forced: bool = False

    def score(self, beta):
        return self.logprob / (len(self.tokens) ** beta) if self.tokens else self.logprob

    def output_tokens(self):
        """Token ids without the end marker."""
        t = self.tokens
        return list(t[:-1]) if t and t[-1] == EOS_ID else list(t)


@dataclass
class SearchGraph:
    """All nodes ever selected by the beam, root first."""

    beam_size: int
    nodes: list = field(default_factory=list)
    best_id: int = -1

    def best_path_ids(self):
        ids = set()
        if self.best_id < 0:
            return ids
        node = self.nodes[self.best_id]
        while node is not None:
            ids.add(node.node_id)
            node = node.parent
        return ids


@dataclass
class BeamResult:
    hypotheses: list
    graph: SearchGraph
    forced: bool

    @property
    def best(self):
        return self.hypotheses[0]


def beam_search(src_factor_ids, models, beam_size, max_len, length_norm_beta=1.0):
    """Decode one source; returns ranked hypotheses plus the search graph.

    If nothing finishes by max_len the live hypotheses are returned
    forcibly terminated, flagged via BeamResult.forced.
    """
    if beam_size < 1:
        raise ValueError("beam size must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    check_ensemble(models)
    k = beam_size
    root = Hypothesis((), 0.0, [], None, None, False, step=0, node_id=0)
    graph = SearchGraph(beam_size=k, nodes=[root])
    live = [(root, start_states(models, src_factor_ids))]
    completed = []
    for step in range(1, max_len + 1):
        expanded = []
        for hyp, states in live:
            y_prev = hyp.tokens[-1] if hyp.tokens else None
            lp, new_states, alpha = advance(models, states, y_prev)
            expanded.append((hyp, new_states, lp, alpha))
        V = expanded[0][2].shape[0]
        scores = np.concatenate([h.logprob + lp for h, _, lp, _ in expanded])
        order = np.argsort(-scores, kind="stable")[: min(k, scores.shape[0])]
        live = []
        for flat in order:
            parent, new_states, _, alpha = expanded[flat // V]
            tok = int(flat % V)
            child = Hypothesis(
                parent.tokens + (tok,), float(scores[flat]), parent.alphas + [alpha],
                parent, tok, tok == EOS_ID, step=step, node_id=len(graph.nodes))
            graph.nodes.append(child)
            if child.finished:
                completed.append(child)
            else:
                live.append((child, new_states))
        if not live:
            break
        if len(completed) >= k:
            if length_norm_beta == 0.0:
                kth = sorted(completed, key=lambda h: -h.logprob)[k - 1].logprob
                if max(h.logprob for h, _ in live) <= kth:
                    break
            else:
                break
    forced = False
    if not completed:
        forced = True
        for hyp, _ in live:
            hyp.forced = True
            completed.append(hyp)
    ranked = sorted(completed, key=lambda h: -h.score(length_norm_beta))
    graph.best_id = ranked[0].node_id
    return BeamResult(ranked, graph, forced)


def greedy_decode(models, src_factor_ids, max_len):
    """Beam of width one; returns output token ids (end marker stripped)."""
    return beam_search(src_factor_ids, models, 1, max_len).best.output_tokens()


# -- corpus scoring -------------------------------------------------------------


def score_corpus(pairs, models, per_token=False):
    """Sentence log-probabilities of aligned (source, target) id pairs.

    For ensembles the score is the mean of the members' sentence
    log-probabilities. With per_token on, also returns the per-position
    rows (mean over members).
    """
    check_ensemble(models)
    caches = [PairGraphCache(m.cfg) for m in models]
    scores, rows = [], []
    for src, tgt in pairs:
        per_model = [
            forward_logprobs(m.params, m.cfg, src, tgt, cache=c)
            for m, c in zip(models, caches)
        ]
        mean_rows = np.mean(per_model, axis=0)
        scores.append(float(mean_rows.sum()))
        rows.append(mean_rows)
    return (scores, rows) if per_token else scores


# -- n-best rescoring --------------------------------------------------------------


def parse_nbest_line(line, lineno):
    parts = line.rstrip("\n").split(" ||| ")
    if len(parts) != 3:
        raise NBestFormatError(
            f"line {lineno}: expected `sent_id ||| hypothesis ||| features`, "
            f"got {len(parts)} fields")
    sid, hyp, feats = parts
    try:
        sid = int(sid)
    except ValueError:
        raise NBestFormatError(f"line {lineno}: sentence id {sid!r} is not an integer") from None
    return sid, hyp, feats


def rescore_nbest(lines, models, sources, resort=False):
    """Append one sentence-logprob feature per model to every n-best line.

    sources is the list of source id arrays the sent_id column points at.
    Line order is preserved unless resort is set, in which case each
    sentence block is reordered by the mean of the appended scores.
    """
    check_ensemble(models)
    for m in models:
        if m.tgt_vocab is None:
            raise ValueError("rescoring needs models with an attached target vocabulary")
    caches = [PairGraphCache(m.cfg) for m in models]
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        sid, hyp, feats = parse_nbest_line(line, lineno)
        if not 0 <= sid < len(sources):
            raise NBestFormatError(f"line {lineno}: sentence id {sid} out of range")
        toks = hyp.split()
        scores = []
        for m, c in zip(models, caches):
            tgt = m.tgt_vocab.encode(toks)
            scores.append(float(forward_logprobs(m.params, m.cfg, sources[sid], tgt, cache=c).sum()))
        new_feats = " ".join([feats.strip()] + [f"{s:.6f}" for s in scores]).strip()
        out.append((sid, np.mean(scores), f"{sid} ||| {hyp} ||| {new_feats}"))
    if resort:
        out.sort(key=lambda e: (e[0], -e[1]))
    return [line for _, _, line in out]
