"""Sentence-level quality metrics and their interpolation.

The built-in metric is smoothed sentence-level n-gram precision (BLEU):
unigram precision is exact, higher orders get add-one smoothing
(match+1)/(total+1), the geometric mean runs over orders up to
min(max_n, hypothesis length), and the usual brevity penalty
exp(1 - ref_len/hyp_len) applies to short hypotheses. An empty hypothesis
scores 0. Scores always land in [0, 1].

Heavier metrics produced by external tools plug in as score files (one
real per line, aligned with the evaluated corpus) and participate in
interpolation like any registered metric; they need the sentence index.
Corpus-level aggregation here is the mean of sentence scores.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def smoothed_sentence_bleu(hyp, ref, max_n=4):
    """Smoothed n-gram precision score of one hypothesis in [0, 1]."""
    hyp = list(hyp)
    ref = list(ref)
    if not ref:
        raise ValueError("reference must be nonempty")
    if not hyp:
        return 0.0
    log_sum = 0.0
    orders = min(max_n, len(hyp))
    for n in range(1, orders + 1):
        hc = _ngram_counts(hyp, n)
        rc = _ngram_counts(ref, n)
        total = len(hyp) - n + 1
        match = sum(min(c, rc[g]) for g, c in hc.items())
        if n == 1:
            if match == 0:
                return 0.0
            p = match / total
        else:
            p = (match + 1) / (total + 1)
        log_sum += math.log(p)
    bleu = math.exp(log_sum / orders)
    if len(hyp) < len(ref):
        bleu *= math.exp(1.0 - len(ref) / len(hyp))
    return bleu


class FileMetric:
    """Externally computed per-sentence scores, one real per line.

    Calling it requires the sentence index of the aligned corpus; it has
    no way to score novel hypotheses, so it suits validation and
    rescoring of fixed files, not sampled candidates.
    """

    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            self.scores = [float(line.strip()) for line in fh if line.strip()]

    def __call__(self, hyp, ref, index=None):
        if index is None:
            raise ValueError("file-backed metric needs a sentence index")
        return self.scores[index]


_REGISTRY = {}


def register_metric(name, fn):
    """Register fn(hyp_tokens, ref_tokens) -> score in [0, 1] under name."""
    _REGISTRY[name] = fn


def registered_metric(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}") from None


register_metric("bleu", smoothed_sentence_bleu)


@dataclass
class MetricSpec:
    """Weighted combination of registered metrics; weights sum to 1."""

    components: tuple

    def __post_init__(self):
        self.components = tuple((str(n), float(w)) for n, w in self.components)
        if not self.components:
            raise ValueError("metric spec needs at least one component")
        if any(w < 0 for _, w in self.components):
            raise ValueError("metric weights must be nonnegative")
        if abs(sum(w for _, w in self.components) - 1.0) > 1e-9:
            raise ValueError("metric weights must sum to 1")


def interpolate(spec, hyp, ref, index=None):
    """Weighted score of one hypothesis under a MetricSpec."""
    total = 0.0
    for name, w in spec.components:
        fn = registered_metric(name)
        if isinstance(fn, FileMetric):
            total += w * fn(hyp, ref, index)
        else:
            total += w * fn(hyp, ref)
    return total


def as_loss(metric_fn):
    """Turn a similarity in [0, 1] into a loss in [0, 1]."""

    def loss(hyp, ref):
        return 1.0 - metric_fn(hyp, ref)

    return loss
