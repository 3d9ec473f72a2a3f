"""Saliency sanity checks under a causal lens: a small float64 CNN stack with
vanilla and guided backpropagation, engineered MNIST tasks with ground-truth
masks, back-door tooling, and the trained-vs-random effect estimator."""

__version__ = "0.1.0"
