"""Sentence-level metrics, metric interpolation, and the minimum-risk
objective on a frozen candidate set, including its gradient check.

Run: python demos/04_metrics_and_minimum_risk.py
"""

import numpy as np

from cgru import metrics
from cgru.metrics import MetricSpec, interpolate, register_metric, smoothed_sentence_bleu
from cgru.model import ModelConfig, init_params
from cgru.tape import finite_diff_check
from cgru.training import expected_risk, mrt_loss

print("smoothed sentence BLEU:")
cases = [
    ("a b c d", "a b c d"),
    ("a b c d", "a b c e"),
    ("a b", "a b c d"),
    ("x y", "a b"),
]
for hyp, ref in cases:
    score = smoothed_sentence_bleu(hyp.split(), ref.split())
    print(f"  bleu({hyp!r}, {ref!r}) = {score:.4f}")

register_metric("length_ratio", lambda h, r: min(len(h), len(r)) / max(len(h), len(r)))
spec = MetricSpec((("bleu", 0.7), ("length_ratio", 0.3)))
mixed = interpolate(spec, "a b c d".split(), "a b c e".split())
print(f"\ninterpolated 0.7*bleu + 0.3*length_ratio = {mixed:.4f}")

print("\nexpected risk over a candidate set with probabilities (0.6, 0.4)")
print("and losses (0, 1):", float(expected_risk(np.log([0.6, 0.4]), np.array([0.0, 1.0]), 1.0)))

# a frozen candidate set makes the risk differentiable and checkable
cfg = ModelConfig((6,), (4,), 6, 4, 4, 4, 4)
params = init_params(cfg, np.random.default_rng(0), ortho_recurrent=False)
ref = (2, 3, 0)
candidates = [ref, (3, 2, 0), (4, 0)]
res = mrt_loss(params, cfg, np.array([[1], [5]]), np.array(ref), n_samples=3,
               sharpness=1.0, loss_fn=metrics.as_loss(smoothed_sentence_bleu),
               rng=np.random.default_rng(1), candidates=candidates)
print(f"\nrisk of the frozen candidate set: {res.risk:.4f}")
print(f"candidate losses: {np.round(res.deltas, 3)}")

report = finite_diff_check(res.graph, res.bindings, tolerance=1e-3, loss=res.risk_node)
print(f"risk gradient vs central differences: worst rel err {report.worst:.2e} "
      f"-> {'PASS' if report.passed else 'FAIL'}")
