"""The conditional effect of model choice on one image.

An unperturbed digit could have come from plain MNIST or from the
half-deletion task (where half the images are left alone). With equal priors
the posterior over the two tasks is (2/3, 1/3), and the effect map is the
posterior-weighted sum of trained-minus-random maps.

Run:  python3 demos/04_effect_of_model_choice.py
Trains two small models first (under a minute on one core).
"""
import numpy as np

from causal_saliency.causal import lambda_effect
from causal_saliency.model import build_model, mnist_arch, randomize
from causal_saliency.tasks import load_bundled_mnist, make_half_deletion_task, task_posterior, train_test_split
from causal_saliency.train import TrainConfig, train

base_train, base_test = train_test_split(load_bundled_mnist(), 1000, seed=0)
digits, _ = train(build_model(mnist_arch(10), 1), base_train, base_test, TrainConfig(max_epochs=2, seed=1))
hd_train = make_half_deletion_task(base_train, 0.5, seed=1)
hd_test = make_half_deletion_task(base_test, 0.5, seed=2)
halves, _ = train(build_model(mnist_arch(2), 2), hd_train, hd_test, TrainConfig(max_epochs=1, seed=2))
random = randomize(halves, 3)

i = next(k for k, m in enumerate(hd_test.gen_meta) if not m["perturbed"])
x = hd_test.images[i]
post = task_posterior(x, ("mnist", "half_deletion"), (0.5, 0.5), 0.5)
print("posterior over tasks:", post.as_dict())

for method in ("VBP", "GBP"):
    res = lambda_effect(x, [("mnist", digits), ("half_deletion", halves)], random, method, "predicted", post)
    baseline = lambda_effect(x, [("mnist", build_model(digits.arch, 10)), ("half_deletion", build_model(halves.arch, 11))],
                             random, method, "predicted", post)
    print(f"{method}: ||Lambda|| = {res.magnitude:.4f}, with random stand-ins {baseline.magnitude:.4f}")
    # the stored map is exactly the weighted sum of the stored differences
    assert np.array_equal(res.recompute(), res.lambda_map)
