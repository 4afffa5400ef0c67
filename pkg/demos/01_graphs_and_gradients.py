"""Build a computation graph by hand, differentiate it, and check the
gradients against central finite differences.

Run: python demos/01_graphs_and_gradients.py
"""

import numpy as np

from cgru.tape import Graph, backward, finite_diff_check, forward

rng = np.random.default_rng(0)

# a two-layer scorer: softmax(tanh(x W1) W2), loss = mean log-loss of row labels
g = Graph()
W1 = g.param("W1")
W2 = g.param("W2")
x = g.input("x")
labels = g.input("labels")
hidden = g.tanh(x @ W1)
logprobs = g.log_softmax(hidden @ W2, axis=1)
picked = g.take(logprobs, labels, axis=1)      # (rows, rows) gather, then trace
loss = g.tag(-g.mean(g.take(picked, np.arange(4), axis=0)), "loss")

bindings = {
    "W1": rng.normal(size=(5, 8)) * 0.3,
    "W2": rng.normal(size=(8, 3)) * 0.3,
    "x": rng.normal(size=(4, 5)),
    "labels": rng.integers(0, 3, size=4),
}

values = forward(g, bindings)
print(f"forward loss: {float(values['loss']):.6f}")

grads = backward(g, loss)
for name, grad in grads.items():
    print(f"grad {name}: shape {grad.shape}, norm {np.linalg.norm(grad):.4f}")

print("\ncentral-difference check (the graph re-runs with perturbed bindings):")
report = finite_diff_check(g, bindings, step=1e-5, tolerance=1e-4, loss=loss)
print(report)
