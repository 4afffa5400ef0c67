"""Training: cross-entropy and minimum-risk objectives, optimizers,
recurrent dropout plans, early stopping and the update loop.

Minibatches are groups of sentences; each sentence runs through its own
pair graph and gradients are accumulated across the group, so no padding
exists and nothing can leak across sentence boundaries. Cross-entropy
normalizes by the token count of the batch, minimum-risk by the sentence
count. Gradients are clipped by global norm before the optimizer step.

Minimum-risk training samples a candidate set per sentence (ancestral
sampling at temperature 1, deduplicated, reference always included),
renormalizes the model scores over that set with a sharpness exponent and
minimizes the expected sentence loss. The candidate set is frozen before
differentiation.

The training log is one tab-separated line per update: update number,
epoch, loss, words/sec.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics, tape
from .data import EOS_ID, save_model
from .model import (
    PairGraphCache,
    decode_gold,
    encode_graph_side,
    pair_bindings,
    param_shapes,
)
from .tape import Graph, matmul, softmax


class TrainingError(Exception):
    pass


class NonFiniteGradientError(TrainingError):
    """A gradient went NaN/Inf; the step was aborted before touching params."""


@dataclass
class TrainingConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    rho: float = 0.95            # adadelta / rmsprop decay
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0       # 0 disables clipping
    batch_size: int = 16
    max_updates: int = 10000
    max_epochs: int = 0          # 0 = no epoch cap
    validate_every: int = 500
    patience: int = 10
    objective: str = "ce"        # "ce" | "mrt"
    mrt_samples: int = 20
    mrt_sharpness: float = 1.0   # published systems run much colder (~5e-3)
    mrt_metric: str = "bleu"     # candidate loss = 1 - metric
    dropout_embed: float = 0.0
    dropout_state: float = 0.0
    dropout_ctx: float = 0.0
    eval_metric: str = "ce"      # "ce" or a registered metric name
    seed: int = 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


# -- objectives ---------------------------------------------------------------


def cross_entropy_loss(logprob_rows):
    """Token-mean negative log-likelihood of gold-token logprob rows.

    Accepts one (T,) array or a list of them (a minibatch). Returns
    (mean per token, per-sentence negative sums).
    """
    if isinstance(logprob_rows, np.ndarray):
        logprob_rows = [logprob_rows]
    rows = [np.asarray(r) for r in logprob_rows]
    if not rows or any(r.size == 0 for r in rows):
        raise ValueError("cross entropy needs at least one scored position")
    sums = [float(-r.sum()) for r in rows]
    return sum(sums) / sum(r.size for r in rows), sums


def expected_risk(logprobs, deltas, sharpness):
    """Risk of a candidate set: sum of Q(y) * delta(y) with
    Q proportional to exp(sharpness * logprob), restricted to the set."""
    q = softmax(sharpness * logprobs, axis=-1)
    return matmul(q, deltas)


def sample_translations(params, cfg, src_factor_ids, n, rng, max_len):
    """Ancestral samples at temperature 1; every sample ends with the end
    marker (appended if max_len cut it off)."""
    from . import model as M

    C = M.encode(params, cfg, M.embed_source(params, src_factor_ids))
    K = C @ params["att_W"]
    s0 = M.init_decoder(params, C)
    out = []
    V = cfg.tgt_vocab_size
    for _ in range(n):
        s, y, toks = s0, None, []
        for _ in range(max_len):
            s, c, _ = M.cgru_step(params, cfg, y, s, C, K=K)
            p = np.exp(M.deep_output(params, cfg, s, y, c))
            y = int(rng.choice(V, p=p / p.sum()))
            toks.append(y)
            if y == EOS_ID:
                break
        if toks[-1] != EOS_ID:
            toks.append(EOS_ID)
        out.append(tuple(toks))
    return out


@dataclass
class MRTResult:
    risk: float
    candidates: list
    deltas: np.ndarray
    graph: Graph
    risk_node: tape.Node
    bindings: dict


def build_mrt_graph(cfg, T_x, candidate_lengths, deltas, sharpness, dtype=np.float64):
    """Risk graph over a frozen candidate set sharing one encoder pass.

    Candidate i binds to input `cand{i}`; deltas are baked in as a
    constant. Returns (graph, risk node).
    """
    g = Graph(dtype=dtype)
    P = {name: g.param(name) for name in param_shapes(cfg)}
    C, K = encode_graph_side(g, P, cfg, T_x)
    sent_lps = []
    for i, T_y in enumerate(candidate_lengths):
        tgt = g.input(f"cand{i}")
        gold, _, _ = decode_gold(g, P, cfg, C, K, tgt, T_y)
        sent_lps.append(g.reshape(g.reduce_sum(gold), (1,)))
    L = g.concat(sent_lps, axis=0)
    risk = g.tag(expected_risk(L, g.const(np.asarray(deltas, dtype=float)), sharpness), "risk")
    return g, risk


def mrt_loss(params, cfg, src_factor_ids, ref_ids, n_samples, sharpness, loss_fn,
             rng, max_len=None, candidates=None):
    """Expected loss of a sampled candidate set; differentiable through the
    candidate scores (the set itself is frozen).

    ref_ids ends with the end marker. loss_fn(candidate, reference) maps
    marker-stripped token id sequences to [0, 1]. Passing candidates
    pins the set explicitly (gradient checks, tests).
    """
    if n_samples < 2:
        raise ValueError("minimum-risk training needs at least 2 samples")
    src = np.asarray(src_factor_ids)
    if src.ndim == 1:
        src = src[:, None]
    ref = tuple(int(t) for t in ref_ids)
    if candidates is None:
        if max_len is None:
            max_len = 2 * len(ref) + 5
        drawn = sample_translations(params, cfg, src, n_samples, rng, max_len)
        candidates = [ref]
        for cand in drawn:
            if cand not in candidates:
                candidates.append(cand)
    else:
        candidates = [tuple(int(t) for t in c) for c in candidates]

    def strip(seq):
        return [t for t in seq if t != EOS_ID]

    deltas = np.array([loss_fn(strip(c), strip(ref)) for c in candidates])
    g, risk = build_mrt_graph(cfg, src.shape[0], [len(c) for c in candidates],
                              deltas, sharpness)
    binds = pair_bindings(params, src, candidates[0])
    del binds["tgt"]
    for i, cand in enumerate(candidates):
        binds[f"cand{i}"] = np.asarray(cand)
    tape.forward(g, binds)
    return MRTResult(float(g.values[risk.idx]), candidates, deltas, g, risk, binds)


# -- optimizers ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-parameter accumulators, created lazily with the parameter shape."""

    step: int = 0
    slots: dict = field(default_factory=dict)

    def slot(self, kind, name, like):
        key = (kind, name)
        if key not in self.slots:
            self.slots[key] = np.zeros_like(like)
        return self.slots[key]


def _require_finite(grads):
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")


def clip_global_norm(grads, max_norm):
    """Rescale all gradients when their joint 2-norm exceeds max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def sgd_step(params, grads, state, lr=1.0):
    _require_finite(grads)
    for name, g in grads.items():
        params[name] -= lr * g
    state.step += 1


def adadelta_step(params, grads, state, rho=0.95, eps=1e-6, lr=1.0):
    _require_finite(grads)
    for name, g in grads.items():
        acc_g = state.slot("acc_grad", name, params[name])
        acc_d = state.slot("acc_delta", name, params[name])
        acc_g[:] = rho * acc_g + (1.0 - rho) * g * g
        delta = -np.sqrt(acc_d + eps) / np.sqrt(acc_g + eps) * g
        acc_d[:] = rho * acc_d + (1.0 - rho) * delta * delta
        params[name] += lr * delta
    state.step += 1


def rmsprop_step(params, grads, state, lr=1e-3, rho=0.9, eps=1e-6):
    _require_finite(grads)
    for name, g in grads.items():
        acc = state.slot("acc_grad", name, params[name])
        acc[:] = rho * acc + (1.0 - rho) * g * g
        params[name] -= lr * g / np.sqrt(acc + eps)
    state.step += 1


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    _require_finite(grads)
    t = state.step + 1
    for name, g in grads.items():
        m = state.slot("m", name, params[name])
        v = state.slot("v", name, params[name])
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t


def optimizer_step(params, grads, state, tcfg):
    name = tcfg.optimizer
    if name == "sgd":
        sgd_step(params, grads, state, lr=tcfg.learning_rate)
    elif name == "adadelta":
        adadelta_step(params, grads, state, rho=tcfg.rho, eps=tcfg.eps, lr=tcfg.learning_rate)
    elif name == "rmsprop":
        rmsprop_step(params, grads, state, lr=tcfg.learning_rate, rho=tcfg.rho, eps=tcfg.eps)
    elif name == "adam":
        adam_step(params, grads, state, lr=tcfg.learning_rate,
                  beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    else:
        raise TrainingError(f"unknown optimizer {name!r}")


# -- dropout --------------------------------------------------------------------


@dataclass
class DropoutPlan:
    """One mask per site, drawn once per sequence and reused at every time
    step of that sequence (masks are Bernoulli(1-rate)/(1-rate))."""

    rates: dict
    masks: dict


def make_dropout_plan(cfg, rate_embed=0.0, rate_state=0.0, rate_ctx=0.0, rng=None, seed=None):
    rates = {"embed": rate_embed, "state": rate_state, "ctx": rate_ctx}
    for kind, r in rates.items():
        if not 0.0 <= r < 1.0:
            raise ValueError(f"{kind} dropout rate must be in [0, 1)")
    if rng is None:
        rng = np.random.default_rng(seed)
    dims = {
        "src_emb": (cfg.src_embed_dim, rate_embed),
        "tgt_emb": (cfg.tgt_embed_dim, rate_embed),
        "enc_fw": (cfg.enc_dim, rate_state),
        "enc_bw": (cfg.enc_dim, rate_state),
        "dec_state": (cfg.dec_dim, rate_state),
        "ctx": (2 * cfg.enc_dim, rate_ctx),
    }
    masks = {}
    for site, (dim, rate) in dims.items():
        if rate == 0.0:
            masks[site] = np.ones(dim)
        else:
            masks[site] = (rng.random(dim) >= rate) / (1.0 - rate)
    return DropoutPlan(rates, masks)


# -- early stopping ----------------------------------------------------------------


@dataclass
class EarlyStopPolicy:
    """Stops once the validation score failed to improve `patience` times
    in a row. Scores are losses: lower is better."""

    patience: int
    best: float = math.inf
    evals_since_improvement: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be positive")

    def update(self, score):
        if score < self.best:
            self.best = score
            self.evals_since_improvement = 0
            return True
        self.evals_since_improvement += 1
        return False

    @property
    def should_stop(self):
        return self.evals_since_improvement >= self.patience


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_score: float
    history: list
    checkpoints: list
    updates: int
    epochs: int
    stop_reason: str


def validation_score(params, mcfg, heldout, tcfg, cache=None):
    """Held-out loss: mean per-token NLL, or mean (1 - metric) of greedy
    decodes when eval_metric names a registered metric."""
    if tcfg.eval_metric == "ce":
        cache = cache or PairGraphCache(mcfg)
        total, tokens = 0.0, 0
        for src, tgt in heldout:
            pg = cache.get(len(src), len(tgt))
            out = tape.forward(pg.graph, pair_bindings(params, src, tgt))
            total += float(out["nll_sum"])
            tokens += len(tgt)
        return total / tokens
    from .decoding import TranslationModel, greedy_decode

    metric = metrics.registered_metric(tcfg.eval_metric)
    tm = TranslationModel(params, mcfg)
    losses = []
    for src, tgt in heldout:
        hyp = greedy_decode([tm], src, max_len=2 * len(tgt) + 5)
        ref = [int(t) for t in tgt if int(t) != EOS_ID]
        losses.append(1.0 - metric(hyp, ref))
    return float(np.mean(losses))


def train_loop(train_pairs, heldout_pairs, params, mcfg, tcfg,
               checkpoint_dir=None, log=None, on_validate=None, dtype=np.float64):
    """Minibatched epochs with periodic validation and early stopping.

    Checkpoints (when checkpoint_dir is set) are written on every
    validation improvement, plus a `best.cgru` alias. on_validate, when
    given, sees (update, score, params) after each validation and may
    return truthy to stop. The run is fully determined by (seed, config)
    at 64-bit: shuffling, dropout and sampling all derive from one
    generator. dtype=float32 trades the bitwise-reproducibility contract
    for speed.
    """
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValueError("training corpus is empty")
    heldout_pairs = list(heldout_pairs or [])
    rng = np.random.default_rng(tcfg.seed)
    dropout_on = tcfg.objective == "ce" and any(
        r > 0 for r in (tcfg.dropout_embed, tcfg.dropout_state, tcfg.dropout_ctx))
    cache = PairGraphCache(mcfg, dropout=dropout_on, dtype=dtype)
    eval_cache = PairGraphCache(mcfg, dtype=dtype)
    opt_state = OptimizerState()
    policy = EarlyStopPolicy(tcfg.patience)
    mrt_loss_fn = metrics.as_loss(metrics.registered_metric(tcfg.mrt_metric))
    best_params = {k: v.copy() for k, v in params.items()}
    best_score = math.inf
    history, checkpoints = [], []
    update, epoch = 0, 0
    stop_reason = None

    while stop_reason is None:
        epoch += 1
        if tcfg.max_epochs and epoch > tcfg.max_epochs:
            stop_reason = "max_epochs"
            break
        order = rng.permutation(len(train_pairs))
        for start in range(0, len(order), tcfg.batch_size):
            chunk = order[start:start + tcfg.batch_size]
            t0 = time.perf_counter()
            total_grads = {}
            batch_loss, tokens = 0.0, 0
            for i in chunk:
                src, tgt = train_pairs[i]
                if tcfg.objective == "ce":
                    masks = None
                    if dropout_on:
                        masks = make_dropout_plan(
                            mcfg, tcfg.dropout_embed, tcfg.dropout_state,
                            tcfg.dropout_ctx, rng=rng).masks
                    pg = cache.get(len(src), len(tgt))
                    out = tape.forward(pg.graph, pair_bindings(params, src, tgt, masks))
                    batch_loss += float(out["nll_sum"])
                    grads = tape.backward(pg.graph, pg.loss)
                else:
                    res = mrt_loss(params, mcfg, src, tgt, tcfg.mrt_samples,
                                   tcfg.mrt_sharpness, mrt_loss_fn, rng)
                    batch_loss += res.risk
                    grads = tape.backward(res.graph, res.risk_node)
                tokens += len(tgt)
                for k, g in grads.items():
                    total_grads[k] = total_grads[k] + g if k in total_grads else g
            denom = tokens if tcfg.objective == "ce" else len(chunk)
            grads = {k: g / denom for k, g in total_grads.items()}
            grads, _ = clip_global_norm(grads, tcfg.clip_norm)
            optimizer_step(params, grads, opt_state, tcfg)
            update += 1
            loss = batch_loss / denom
            history.append((update, epoch, loss))
            if log is not None:
                wps = tokens / max(time.perf_counter() - t0, 1e-9)
                log.write(f"{update}\t{epoch}\t{loss:.6f}\t{wps:.1f}\n")

            if heldout_pairs and update % tcfg.validate_every == 0:
                score = validation_score(params, mcfg, heldout_pairs, tcfg, eval_cache)
                if policy.update(score):
                    best_score = score
                    best_params = {k: v.copy() for k, v in params.items()}
                    if checkpoint_dir is not None:
                        path = os.path.join(checkpoint_dir, f"checkpoint-{update:06d}.cgru")
                        meta = {"training": tcfg.to_dict(), "update": update}
                        save_model(path, params, mcfg, extra_meta=meta)
                        save_model(os.path.join(checkpoint_dir, "best.cgru"),
                                   params, mcfg, extra_meta=meta)
                        checkpoints.append(path)
                if on_validate is not None and on_validate(update, score, params):
                    stop_reason = "callback"
                elif policy.should_stop:
                    stop_reason = "early_stop"
            if stop_reason is None and update >= tcfg.max_updates:
                stop_reason = "max_updates"
            if stop_reason:
                break

    return TrainResult(params, best_params, best_score, history, checkpoints,
                       update, epoch, stop_reason)
