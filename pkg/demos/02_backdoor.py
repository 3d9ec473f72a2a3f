"""The back-door view of the model randomization test.

The task T picks both the image distribution X and the trained model M, and
the saliency map S depends on X and M. Comparing maps of a trained and a
random model on the same images therefore mixes the effect of M with the
effect of T. Adjusting for T closes the path M <- T -> X -> S.

Run:  python3 demos/02_backdoor.py
"""
import numpy as np

from causal_saliency.causal import DiscreteDistribution, adjustment_estimate, backdoor_satisfies, sanity_check_dag

dag = sanity_check_dag()
for z in (set(), {"T"}, {"X"}):
    res = backdoor_satisfies(dag, "M", "S", z)
    print(f"Z = {sorted(z)!s:8} satisfied: {res.satisfied!s:5} {res.certificate}")

# A toy binary version: T=1 makes perturbed images and trained models more
# likely, and "salient" maps (S=1) follow both the image and the model.
cpts = {
    "T": np.array([0.5, 0.5]),
    "X": np.array([[0.9, 0.1], [0.2, 0.8]]),        # Pr(X | T)
    "M": np.array([[0.8, 0.2], [0.1, 0.9]]),        # Pr(M | T)
    "S": np.array([[[0.9, 0.1], [0.6, 0.4]],        # Pr(S | T, X, M); S ignores T
                   [[0.9, 0.1], [0.6, 0.4]]]),
}
cpts["S"][:, 1, :] = [[0.3, 0.7], [0.1, 0.9]]
dist = DiscreteDistribution.from_cpts(dag, {v: (0, 1) for v in dag.nodes}, cpts)

naive = dist.prob({"S": 1, "M": 1}) / dist.prob({"M": 1})
adjusted = adjustment_estimate(dist, dag, {"M": 1}, {"S": 1}, {"T"})
print(f"Pr(S=1 | M=1)     = {naive:.4f}   (confounded by the task)")
print(f"Pr(S=1 | do(M=1)) = {adjusted:.4f}   (adjusted for T)")

try:
    adjustment_estimate(dist, dag, {"M": 1}, {"S": 1}, set())
except ValueError as exc:
    print("without adjustment:", exc)
