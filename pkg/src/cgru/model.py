"""Attentional encoder-decoder with a conditional-GRU decoder.

Architecture: factored source embeddings (one table per factor,
concatenated), a bidirectional gated-recurrence encoder whose per-position
forward/backward states are concatenated into annotations, a decoder
initialized from the mean annotation, and a two-block conditional GRU per
output step: block one consumes the previous symbol, the attention
mechanism turns the intermediate state into a context vector, block two
consumes that context. Recurrence happens only at the level of the whole
conditional cell, never inside the two blocks. Output probabilities come
from a deep-output layer: a tanh hidden layer over (state, previous
embedding, context) followed by a softmax.

All equations are written against the tape dispatch helpers, so the same
functions run on plain numpy arrays (fast inference) and on graph Nodes
(differentiable training path). `build_pair_graph` assembles the full
teacher-forced log-probability graph for one sentence pair; training,
scoring and the gradient checks all share it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tape
from .tape import Graph, concat, log_softmax, matmul, mean, reduce_sum, reshape, rows, sigmoid, softmax, take, tanh, transpose


@dataclass
class ModelConfig:
    """Dimensions and structural switches; serialized into model archives."""

    src_vocab_sizes: tuple[int, ...]
    factor_dims: tuple[int, ...]
    tgt_vocab_size: int
    tgt_embed_dim: int
    enc_dim: int
    dec_dim: int
    att_dim: int
    tie_target: bool = False

    def __post_init__(self):
        self.src_vocab_sizes = tuple(int(v) for v in self.src_vocab_sizes)
        self.factor_dims = tuple(int(v) for v in self.factor_dims)
        if len(self.src_vocab_sizes) != len(self.factor_dims):
            raise ValueError("one embedding width is required per factor")
        if not self.src_vocab_sizes:
            raise ValueError("at least one source factor is required")

    @property
    def num_factors(self):
        return len(self.src_vocab_sizes)

    @property
    def src_embed_dim(self):
        return sum(self.factor_dims)

    def to_dict(self):
        d = asdict(self)
        d["src_vocab_sizes"] = list(self.src_vocab_sizes)
        d["factor_dims"] = list(self.factor_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in (
            "src_vocab_sizes", "factor_dims", "tgt_vocab_size", "tgt_embed_dim",
            "enc_dim", "dec_dim", "att_dim", "tie_target")})


def _gru_shapes(shapes, prefix, nin, nout):
    shapes[f"{prefix}_W"] = (nin, nout)
    shapes[f"{prefix}_Wr"] = (nin, nout)
    shapes[f"{prefix}_Wz"] = (nin, nout)
    shapes[f"{prefix}_U"] = (nout, nout)
    shapes[f"{prefix}_Ur"] = (nout, nout)
    shapes[f"{prefix}_Uz"] = (nout, nout)
    shapes[f"{prefix}_b"] = (nout,)
    shapes[f"{prefix}_br"] = (nout,)
    shapes[f"{prefix}_bz"] = (nout,)


def param_shapes(cfg: ModelConfig):
    """Canonical name -> shape map for every trained tensor.

    With target tying the output projection is the transposed target
    embedding table, so `out_Wo` disappears from the set. Embedding
    lookups carry no bias; every other affine map has one.
    """
    d, dd, m = cfg.enc_dim, cfg.dec_dim, cfg.tgt_embed_dim
    shapes = {}
    for f, (v, mf) in enumerate(zip(cfg.src_vocab_sizes, cfg.factor_dims)):
        shapes[f"src_emb_{f}"] = (v, mf)
    shapes["tgt_emb"] = (cfg.tgt_vocab_size, m)
    _gru_shapes(shapes, "enc_fw", cfg.src_embed_dim, d)
    _gru_shapes(shapes, "enc_bw", cfg.src_embed_dim, d)
    shapes["init_W"] = (2 * d, dd)
    shapes["init_b"] = (dd,)
    _gru_shapes(shapes, "dec1", m, dd)
    shapes["att_W"] = (2 * d, cfg.att_dim)
    shapes["att_U"] = (dd, cfg.att_dim)
    shapes["att_v"] = (cfg.att_dim,)
    shapes["att_b"] = (cfg.att_dim,)
    _gru_shapes(shapes, "dec2", 2 * d, dd)
    shapes["out_W1"] = (dd, m)
    shapes["out_W2"] = (m, m)
    shapes["out_W3"] = (2 * d, m)
    shapes["out_b"] = (m,)
    if not cfg.tie_target:
        shapes["out_Wo"] = (m, cfg.tgt_vocab_size)
    shapes["out_bo"] = (cfg.tgt_vocab_size,)
    return shapes


def _orthonormal(rng, n):
    a = rng.normal(size=(n, n))
    q, _ = np.linalg.qr(a)
    return q


_RECURRENT = tuple(f"{p}_{s}" for p in ("enc_fw", "enc_bw", "dec1", "dec2")
                   for s in ("U", "Ur", "Uz"))


def init_params(cfg, rng, scale=0.08, ortho_recurrent=True, dtype=np.float64):
    """Fresh parameters: uniform [-scale, scale] weights, zero biases,
    optionally orthonormal square recurrent matrices."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("_b", "_br", "_bz", "_bo")):
            arr = np.zeros(shape)
        elif ortho_recurrent and name in _RECURRENT:
            arr = _orthonormal(rng, shape[0])
        else:
            arr = rng.uniform(-scale, scale, size=shape)
        params[name] = arr.astype(dtype)
    return params


# -- equations (shared by graph and array paths) -------------------------------


def _gru_step_pre(params, prefix, xw, xwr, xwz, h, h_gates=None):
    """Gated step from precomputed input projections (biases included).

    h_gates, when given, replaces h inside the gate/candidate projections
    (recurrent dropout); the interpolation keeps the raw h.
    """
    hg = h if h_gates is None else h_gates
    r = sigmoid(xwr + matmul(hg, params[f"{prefix}_Ur"]))
    z = sigmoid(xwz + matmul(hg, params[f"{prefix}_Uz"]))
    # reset gate scales the projected previous state, not the raw state
    cand = tanh(xw + r * matmul(hg, params[f"{prefix}_U"]))
    return (1.0 - z) * cand + z * h


def gru_step(params, prefix, x, h, h_gates=None):
    """One gated recurrent step; x (B, nin), h (B, nout) -> (B, nout)."""
    xw = matmul(x, params[f"{prefix}_W"]) + params[f"{prefix}_b"]
    xwr = matmul(x, params[f"{prefix}_Wr"]) + params[f"{prefix}_br"]
    xwz = matmul(x, params[f"{prefix}_Wz"]) + params[f"{prefix}_bz"]
    return _gru_step_pre(params, prefix, xw, xwr, xwz, h, h_gates)


def embed_source(params, factor_ids):
    """Concatenated factor embeddings, one row per source position.

    factor_ids: (T_x, F) int array, or a list of per-factor id columns
    (arrays or graph Nodes). Ids must already be inside each factor's
    vocabulary; unknown-token replacement happens upstream.
    """
    if isinstance(factor_ids, (list, tuple)):
        cols = list(factor_ids)
    else:
        arr = np.asarray(factor_ids)
        if arr.ndim != 2:
            raise ValueError("factor id array must be (positions, factors)")
        cols = [arr[:, f] for f in range(arr.shape[1])]
    parts = []
    for f, col in enumerate(cols):
        table = params[f"src_emb_{f}"]
        if isinstance(col, np.ndarray) and not isinstance(table, tape.Node):
            if col.size and (col.min() < 0 or col.max() >= table.shape[0]):
                raise ValueError(f"factor {f}: token id out of vocabulary range")
        parts.append(take(table, col))
    return concat(parts, axis=1)


def _gru_run(params, prefix, dim, xs, length, reverse=False, state_mask=None, like=None):
    """Run one encoder direction; returns the list of (1, dim) states."""
    xw = matmul(xs, params[f"{prefix}_W"]) + params[f"{prefix}_b"]
    xwr = matmul(xs, params[f"{prefix}_Wr"]) + params[f"{prefix}_br"]
    xwz = matmul(xs, params[f"{prefix}_Wz"]) + params[f"{prefix}_bz"]
    h = np.zeros((1, dim)) if like is None else np.zeros((1, dim), dtype=like)
    order = range(length - 1, -1, -1) if reverse else range(length)
    out = [None] * length
    for t in order:
        hg = h * state_mask if state_mask is not None else None
        h = _gru_step_pre(params, prefix, rows(xw, t, t + 1), rows(xwr, t, t + 1),
                          rows(xwz, t, t + 1), h, h_gates=hg)
        out[t] = h
    return out


def encode(params, cfg, src_embs, length=None, state_masks=None):
    """Bidirectional encoder; (T_x, m_src) embeddings -> annotations (T_x, 2d).

    Row i is the forward state at i concatenated with the backward state
    at i. Both directions start from zero states.
    """
    T = src_embs.shape[0] if length is None else length
    m_fw = m_bw = None
    if state_masks is not None:
        m_fw, m_bw = state_masks
    like = src_embs.dtype if isinstance(src_embs, np.ndarray) else None
    fw = _gru_run(params, "enc_fw", cfg.enc_dim, src_embs, T, state_mask=m_fw, like=like)
    bw = _gru_run(params, "enc_bw", cfg.enc_dim, src_embs, T, reverse=True, state_mask=m_bw, like=like)
    return concat([concat([fw[t], bw[t]], axis=1) for t in range(T)], axis=0)


def init_decoder(params, C):
    """Initial decoder state from the mean annotation; (T_x, 2d) -> (1, dec)."""
    return tanh(matmul(mean(C, axis=0, keepdims=True), params["init_W"]) + params["init_b"])


def target_prev_embedding(params, cfg, y_prev):
    """Embedding row(s) of the previously decoded symbol(s).

    None stands for the start of the sentence and maps to an all-zero
    row rather than a reserved vocabulary id.
    """
    if y_prev is None:
        return np.zeros((1, cfg.tgt_embed_dim))
    if isinstance(y_prev, (int, np.integer)):
        y_prev = np.asarray([y_prev])
    return take(params["tgt_emb"], y_prev)


def gru1_step(params, cfg, y_prev, s_prev, emb=None, state_mask=None):
    """First transition block: previous symbol + previous state -> s'."""
    if emb is None:
        emb = target_prev_embedding(params, cfg, y_prev)
    hg = s_prev * state_mask if state_mask is not None else None
    return gru_step(params, "dec1", emb, s_prev, h_gates=hg)


def attention(params, C, s_prime, K=None):
    """Alignment over the annotation set for one query state.

    C (T_x, 2d), s_prime (1, dec) -> context (2d,), weights (T_x,).
    K, when given, is the precomputed C @ att_W (reused across steps).
    """
    if K is None:
        K = matmul(C, params["att_W"])
    q = matmul(s_prime, params["att_U"]) + params["att_b"]
    e = matmul(tanh(K + q), params["att_v"])
    alpha = softmax(e, axis=-1)
    return matmul(alpha, C), alpha


def gru2_step(params, s_prime, c):
    """Second transition block: context + intermediate state -> s_j."""
    return gru_step(params, "dec2", c, s_prime)


def cgru_step(params, cfg, y_prev, s_prev, C, K=None, state_mask=None, ctx_mask=None):
    """One whole conditional-GRU step; returns (s_j, context, weights).

    Composition of the two transition blocks with attention in between;
    this is the only level at which the decoder recurs.
    """
    s_p = gru1_step(params, cfg, y_prev, s_prev, state_mask=state_mask)
    c, alpha = attention(params, C, s_p, K=K)
    if ctx_mask is not None:
        c = c * ctx_mask
    return gru2_step(params, s_p, c), c, alpha


def output_matrix(params):
    """Output projection; the transposed embedding table when tied."""
    if "out_Wo" in params:
        return params["out_Wo"]
    return transpose(params["tgt_emb"])


def deep_output(params, cfg, s, y_prev, c, emb=None):
    """Log-probabilities over the target vocabulary for one step -> (V,).

    Reads the updated state s_j (the state that already saw this step's
    context), the previous symbol's embedding and the context vector.
    """
    if emb is None:
        emb = target_prev_embedding(params, cfg, y_prev)
    t = tanh(matmul(s, params["out_W1"]) + matmul(emb, params["out_W2"])
             + matmul(c, params["out_W3"]) + params["out_b"])
    logits = matmul(t, output_matrix(params)) + params["out_bo"]
    return reshape(log_softmax(logits, axis=-1), (-1,))


# -- full teacher-forced pair graph --------------------------------------------

DROPOUT_SITES = ("src_emb", "tgt_emb", "enc_fw", "enc_bw", "dec_state", "ctx")


@dataclass
class PairGraph:
    """Differentiable log-probability graph for one sentence pair shape."""

    graph: Graph
    cfg: ModelConfig
    T_x: int
    T_y: int
    dropout: bool
    loss: tape.Node
    gold: tape.Node
    step_logprobs: list = field(default_factory=list)
    step_alphas: list = field(default_factory=list)


def encode_graph_side(g, P, cfg, T_x, masks=None):
    """Source side of a graph: factor id inputs -> (annotations, projection)."""
    src_cols = [g.input(f"src_f{f}") for f in range(cfg.num_factors)]
    x = embed_source(P, src_cols)
    if masks:
        x = x * masks["src_emb"]
    C = encode(P, cfg, x, length=T_x,
               state_masks=(masks["enc_fw"], masks["enc_bw"]) if masks else None)
    return C, matmul(C, P["att_W"])


def decode_gold(g, P, cfg, C, K, tgt, T_y, masks=None):
    """Teacher-forced decoder branch over an existing annotation set.

    tgt is a (T_y,) integer input node. Returns the (T_y,) vector of
    gold-token log-probabilities plus the per-step full distributions and
    attention rows.
    """
    s = init_decoder(P, C)
    emb_all = take(P["tgt_emb"], tgt)          # row j-1 feeds step j
    if masks:
        emb_all = emb_all * masks["tgt_emb"]
    gold_bits, step_logprobs, step_alphas = [], [], []
    for j in range(T_y):
        emb_prev = g.const(np.zeros((1, cfg.tgt_embed_dim))) if j == 0 \
            else rows(emb_all, j - 1, j)
        s_gates = s * masks["dec_state"] if masks else None
        s_p = gru_step(P, "dec1", emb_prev, s, h_gates=s_gates)
        c, alpha = attention(P, C, s_p, K=K)
        if masks:
            c = c * masks["ctx"]
        s = gru_step(P, "dec2", c, s_p)
        lp = deep_output(P, cfg, s, None, c, emb=emb_prev)
        gold_bits.append(g.take(lp, g.slice_(tgt, (slice(j, j + 1),)), axis=0))
        step_logprobs.append(lp)
        step_alphas.append(alpha)
    return concat(gold_bits, axis=0), step_logprobs, step_alphas


def build_pair_graph(cfg, T_x, T_y, dropout=False, dtype=np.float64):
    """Teacher-forced graph for a (T_x, T_y) pair shape.

    Leaves: every model parameter, per-factor id columns src_f0.., the
    target id vector tgt, and one mask vector per dropout site when
    dropout is on. Tagged nodes: gold_logprobs (T_y,) and nll_sum (the
    training loss before any batch normalization).
    """
    if T_x < 1 or T_y < 1:
        raise ValueError("source and target must be nonempty")
    g = Graph(dtype=dtype)
    P = {name: g.param(name) for name in param_shapes(cfg)}
    tgt = g.input("tgt")
    masks = {site: g.input(f"mask_{site}") for site in DROPOUT_SITES} if dropout else None
    C, K = encode_graph_side(g, P, cfg, T_x, masks)
    pg = PairGraph(g, cfg, T_x, T_y, dropout, loss=None, gold=None)
    gold, pg.step_logprobs, pg.step_alphas = decode_gold(g, P, cfg, C, K, tgt, T_y, masks)
    pg.gold = g.tag(gold, "gold_logprobs")
    pg.loss = g.tag(-reduce_sum(pg.gold), "nll_sum")
    return pg


def pair_bindings(params, src_factor_ids, tgt_ids, masks=None):
    """Leaf bindings for a pair graph built with matching shapes."""
    src = np.asarray(src_factor_ids)
    if src.ndim == 1:
        src = src[:, None]
    binds = dict(params)
    for f in range(src.shape[1]):
        binds[f"src_f{f}"] = src[:, f]
    binds["tgt"] = np.asarray(tgt_ids)
    if masks:
        for site in DROPOUT_SITES:
            binds[f"mask_{site}"] = masks[site]
    return binds


class PairGraphCache:
    """Reuses pair graphs across sentences with equal (T_x, T_y)."""

    def __init__(self, cfg, dropout=False, dtype=np.float64):
        self.cfg = cfg
        self.dropout = dropout
        self.dtype = dtype
        self._graphs = {}

    def get(self, T_x, T_y):
        key = (T_x, T_y)
        pg = self._graphs.get(key)
        if pg is None:
            pg = build_pair_graph(self.cfg, T_x, T_y, dropout=self.dropout, dtype=self.dtype)
            self._graphs[key] = pg
        return pg


def forward_logprobs(params, cfg, src_factor_ids, tgt_ids, masks=None, cache=None):
    """Per-position log-probability of each target token (teacher forcing).

    src_factor_ids is (T_x, F); tgt_ids includes the terminating
    end-of-sentence id. Position j conditions on the updated state s_j
    and the gold previous symbol. Returns a (T_y,) array; its sum is the
    sentence log-probability used by scoring.
    """
    src = np.asarray(src_factor_ids)
    if src.ndim == 1:
        src = src[:, None]
    tgt = np.asarray(tgt_ids)
    if src.shape[0] < 1 or tgt.shape[0] < 1:
        raise ValueError("source and target must be nonempty")
    if cache is not None:
        pg = cache.get(src.shape[0], tgt.shape[0])
    else:
        pg = build_pair_graph(cfg, src.shape[0], tgt.shape[0], dropout=masks is not None)
    out = tape.forward(pg.graph, pair_bindings(params, src, tgt, masks))
    return out["gold_logprobs"]
