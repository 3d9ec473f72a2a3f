"""Acceptance checks. Each test logs a PASS/FAIL line through ``criterion_log``
and then asserts, so the summary at the end of the run lists every verdict.

The trained models come from full runs of the configs in ``configs/``; those
runs are shared across the module and take the bulk of the wall time.
"""
import dataclasses
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from causal_saliency.causal import (
    CausalDag, DiscreteDistribution, adjustment_estimate, backdoor_satisfies, lambda_effect,
)
from causal_saliency.model import (
    FLATTEN, RELU, ArchSpec, build_model, conv, fc, forward, load_model, mnist_arch, pool,
)
from causal_saliency.report import sample_indices
from causal_saliency.runner import parse_config, read_table, run_experiment
from causal_saliency.saliency import gbp, saliency_batch, vbp
from causal_saliency.tasks import (
    TaskPosterior, load_bundled_mnist, load_dataset, task_posterior, train_test_split,
)
from causal_saliency.tensor import Tensor, conv2d, dense, grad_check, maxpool2d, mul, tensor_sum
from causal_saliency.train import TrainConfig, train

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
NAMES = "ABCDE"


# --------------------------------------------------------------------------
# shared experiment runs
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    cache = {}

    def get(name):
        if name not in cache:
            cfg = parse_config(CONFIGS / f"{name}.cfg")
            cfg = dataclasses.replace(cfg, output_dir=str(tmp_path_factory.mktemp(name)))
            start = time.process_time()
            manifest = run_experiment(cfg)
            cache[name] = (manifest, time.process_time() - start)
        return cache[name]
    return get


def aggregates(manifest):
    _, _, rows = read_table(manifest.path("report_aggregate"))
    return {(m, q): float(mean) for m, q, mean, _ in rows}


# --------------------------------------------------------------------------
# 1. autodiff correctness
# --------------------------------------------------------------------------

def random_network(rng):
    c, h = int(rng.integers(1, 3)), int(rng.integers(6, 10))
    layers = [conv(int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))),
              RELU]
    if rng.random() < 0.6:
        layers.append(pool(2))
    if rng.random() < 0.5:
        layers += [conv(int(rng.integers(1, 3)), 2, 1, 1), RELU]
    layers += [FLATTEN, fc(int(rng.integers(3, 7))), RELU, fc(3)]
    arch = ArchSpec(tuple(layers), (c, h, h), 3)
    model = build_model(arch, int(rng.integers(2 ** 31)))
    for name, p in model.params.items():
        if name.endswith("bias"):
            p.data = rng.normal(scale=0.3, size=p.shape)
    return model


def kink_margin(model, x):
    """Smallest distance of any ReLU input from 0 and of any pooling window's
    runner-up from its maximum, along the forward pass at ``x``."""
    margin = np.inf
    h = x
    for i, layer in enumerate(model.arch.layers):
        if layer.kind == "conv2d":
            s, p = layer.args[2], layer.args[3]
            h = conv2d(Tensor(h), model.params[f"layer{i}.weight"], model.params[f"layer{i}.bias"], s, p).data
        elif layer.kind == "dense":
            h = dense(Tensor(h), model.params[f"layer{i}.weight"], model.params[f"layer{i}.bias"]).data
        elif layer.kind == "relu":
            margin = min(margin, np.abs(h).min())
            h = np.maximum(h, 0)
        elif layer.kind == "maxpool":
            k = layer.args[0]
            n, c, hh, ww = h.shape
            win = h[:, :, :hh // k * k, :ww // k * k].reshape(n, c, hh // k, k, ww // k, k)
            win = np.sort(win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh // k, ww // k, k * k), axis=-1)
            margin = min(margin, (win[..., -1] - win[..., -2]).min())
            h = win[..., -1]
        elif layer.kind == "flatten":
            h = h.reshape(len(h), -1)
    return margin


def test_criterion_1_autodiff_matches_finite_differences(criterion_log):
    rng = np.random.default_rng(1)
    start = time.process_time()
    errors, rejected = [], 0
    while len(errors) < 100:
        model = random_network(rng)
        x = rng.normal(size=(1, *model.arch.input_shape))
        if kink_margin(model, x) < 1e-3:
            rejected += 1
            continue
        weights = Tensor(rng.normal(size=(1, 3)))
        errors.append(grad_check(lambda t: tensor_sum(mul(forward(model, t), weights)), x, 1e-6))
    elapsed = time.process_time() - start
    worst = max(errors)
    ok = worst < 1e-4 and elapsed < 60
    criterion_log("criterion 1", ok, f"max relative error {worst:.2e} over 100 pairs (< 1e-4), "
                                     f"{elapsed:.1f} s CPU (< 60 s), {rejected} near-kink draws resampled")
    assert ok


# --------------------------------------------------------------------------
# 2. oracle equivalence
# --------------------------------------------------------------------------

def loop_conv(x, k, b, stride, pad):
    n, c, h, w = x.shape
    f, _, kh, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kh) // stride + 1
    out = np.empty((n, f, ho, wo))
    for i, o, r, q in itertools.product(range(n), range(f), range(ho), range(wo)):
        acc = b[o]
        for ch, u, v in itertools.product(range(c), range(kh), range(kh)):
            acc += xp[i, ch, r * stride + u, q * stride + v] * k[o, ch, u, v]
        out[i, o, r, q] = acc
    return out


def loop_pool(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((n, c, ho, wo))
    for i, ch, r, q in itertools.product(range(n), range(c), range(ho), range(wo)):
        best = -np.inf
        for u, v in itertools.product(range(k), range(k)):
            best = max(best, x[i, ch, r * s + u, q * s + v])
        out[i, ch, r, q] = best
    return out


def loop_dense(x, w, b):
    out = np.empty((x.shape[0], w.shape[1]))
    for i, j in itertools.product(range(x.shape[0]), range(w.shape[1])):
        acc = b[j]
        for k in range(x.shape[1]):
            acc += x[i, k] * w[k, j]
        out[i, j] = acc
    return out


def test_criterion_2_layer_oracles(criterion_log):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        c, h, w = (int(v) for v in rng.integers(1, 4, 1).tolist() + rng.integers(5, 9, 2).tolist())
        k, s, p = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(2, c, h, w))
        ker, b = rng.normal(size=(2, c, k, k)), rng.normal(size=2)
        worst = max(worst, np.abs(conv2d(Tensor(x), Tensor(ker), Tensor(b), s, p).data
                                  - loop_conv(x, ker, b, s, p)).max())
        pk, ps = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        worst = max(worst, np.abs(maxpool2d(Tensor(x), pk, ps).data - loop_pool(x, pk, ps)).max())
        xd, wd, bd = rng.normal(size=(3, 7)), rng.normal(size=(7, 4)), rng.normal(size=4)
        worst = max(worst, np.abs(dense(Tensor(xd), Tensor(wd), Tensor(bd)).data - loop_dense(xd, wd, bd)).max())
    ok = worst < 1e-12
    criterion_log("criterion 2.layers", ok, f"conv/dense/pool vs loop oracles, max |diff| {worst:.1e} (< 1e-12)")
    assert ok


def _paths(dag, x, y):
    nbrs = {n: set(dag.parents(n)) | set(dag.children(n)) for n in dag.nodes}
    stack = [[x]]
    while stack:
        path = stack.pop()
        for nb in nbrs[path[-1]] - set(path):
            if nb == y:
                yield path + [nb]
            else:
                stack.append(path + [nb])


def _oracle_backdoor(dag, x, y, z, desc):
    if desc[x] & z:
        return False
    for path in _paths(dag, x, y):
        if path[1] not in dag.parents(x):
            continue
        blocked = False
        for a, m, b in zip(path, path[1:], path[2:]):
            parents = dag.parents(m)
            if a in parents and b in parents:
                if m not in z and not (desc[m] & z):
                    blocked = True
                    break
            elif m in z:
                blocked = True
                break
        if not blocked:
            return False
    return True


def test_criterion_2_backdoor_matches_d_separation_oracle(criterion_log):
    start = time.process_time()
    checked = mismatches = 0
    for n in range(2, 6):
        pairs = list(itertools.combinations(range(n), 2))
        for bits in range(2 ** len(pairs)):
            dag = CausalDag(NAMES[:n], [(NAMES[i], NAMES[j]) for k, (i, j) in enumerate(pairs) if bits >> k & 1])
            desc = {v: dag.descendants(v) for v in dag.nodes}
            for x, y in itertools.permutations(dag.nodes, 2):
                rest = [v for v in dag.nodes if v not in (x, y)]
                for r in range(len(rest) + 1):
                    for z in itertools.combinations(rest, r):
                        z = set(z)
                        mismatches += bool(backdoor_satisfies(dag, x, y, z)) != _oracle_backdoor(dag, x, y, z, desc)
                        checked += 1
    elapsed = time.process_time() - start
    ok = mismatches == 0
    criterion_log("criterion 2.backdoor", ok, f"{mismatches} disagreements over {checked} (DAG, x, y, Z) cases "
                                              f"on every DAG with 2-5 nodes, {elapsed:.0f} s CPU")
    assert ok


def test_criterion_2_adjustment_matches_truncated_factorization(criterion_log):
    rng = np.random.default_rng(3)
    start = time.process_time()
    worst, done = 0.0, 0
    while done < 1000:
        n = int(rng.integers(3, 5))
        edges = [(NAMES[i], NAMES[j]) for i, j in itertools.combinations(range(n), 2) if rng.random() < 0.6]
        dag = CausalDag(NAMES[:n], edges)
        x, y = (str(v) for v in rng.choice(list(dag.nodes), 2, replace=False))
        if y in dag.parents(x):
            continue
        domains = {v: tuple(range(int(rng.integers(2, 4)))) for v in dag.nodes}
        cpts = {v: rng.dirichlet(np.ones(len(domains[v])), size=tuple(len(domains[p]) for p in dag.parents(v)))
                for v in dag.nodes}
        dist = DiscreteDistribution.from_cpts(dag, domains, cpts)
        xv, yv = int(rng.integers(len(domains[x]))), int(rng.integers(len(domains[y])))
        got = adjustment_estimate(dist, dag, {x: xv}, {y: yv}, set(dag.parents(x)))
        # mutilated graph: drop the factor of x, clamp x, sum the remaining product
        want = 0.0
        for values in itertools.product(*(domains[v] for v in dag.nodes)):
            a = dict(zip(dag.nodes, values))
            if a[x] != xv or a[y] != yv:
                continue
            want += np.prod([cpts[v][tuple(a[p] for p in dag.parents(v)) + (a[v],)]
                             for v in dag.nodes if v != x])
        worst = max(worst, abs(got - want))
        done += 1
    elapsed = time.process_time() - start
    ok = worst < 1e-10
    criterion_log("criterion 2.adjustment", ok, f"1000 random joints, max |diff| {worst:.1e} (< 1e-10), "
                                                f"{elapsed:.0f} s CPU")
    assert ok


# --------------------------------------------------------------------------
# 3. training targets
# --------------------------------------------------------------------------

@pytest.mark.parametrize("name,target,budget", [
    ("half_deletion", 0.99, 15 * 60),
    ("shape_shape", 0.99, 15 * 60),
    ("shape_digit", 0.99, 15 * 60),
    ("pair", 0.90, 30 * 60),
])
def test_criterion_3_training_targets(experiment, criterion_log, name, target, budget):
    manifest, cpu = experiment(name)
    acc = float(manifest.summary["best_accuracy"])
    ok = acc >= target and cpu <= budget
    criterion_log(f"criterion 3.{name}", ok, f"test accuracy {acc:.3f} (>= {target}), "
                                             f"full run {cpu / 60:.1f} min CPU (<= {budget // 60} min)")
    assert ok


# --------------------------------------------------------------------------
# 4. trained vs random maps
# --------------------------------------------------------------------------

TASKS = ("half_deletion", "shape_shape", "shape_digit", "pair")


@pytest.mark.parametrize("name", TASKS)
@pytest.mark.parametrize("method", ["VBP", "GBP"])
def test_criterion_4a_localization(experiment, criterion_log, name, method):
    agg = aggregates(experiment(name)[0])
    trained, random = agg[(method, "localization_trained")], agg[(method, "localization_random")]
    ratio = trained / random if random > 0 else np.inf
    ok = ratio >= 1.5
    criterion_log(f"criterion 4.a {name} {method}", ok,
                  f"mean localization trained {trained:.3f} / random {random:.3f} = {ratio:.2f} (>= 1.5)")
    assert ok


@pytest.mark.parametrize("name", TASKS)
@pytest.mark.parametrize("method", ["VBP", "GBP"])
def test_criterion_4b_spearman(experiment, criterion_log, name, method):
    rho = aggregates(experiment(name)[0])[(method, "spearman")]
    ok = rho < 0.5
    criterion_log(f"criterion 4.b {name} {method}", ok, f"mean Spearman trained vs random {rho:.3f} (< 0.5)")
    assert ok


@pytest.fixture(scope="module")
def digit_model():
    """Plain 10-way MNIST classifier: the other member of the half-deletion task family."""
    base_train, base_test = train_test_split(load_bundled_mnist(), 1000, 0)
    model, _ = train(build_model(mnist_arch(10), 11), base_train, base_test,
                     TrainConfig(max_epochs=4, seed=11))
    return model


@pytest.mark.parametrize("method", ["VBP", "GBP"])
def test_criterion_4c_effect_above_noise(experiment, digit_model, criterion_log, method):
    manifest, _ = experiment("half_deletion")
    test_set = load_dataset(manifest.path("dataset_test"))
    hd_model = load_model(manifest.path("model_trained"))
    random = load_model(manifest.path("model_random"))
    # independently seeded untrained stand-ins for the two trained models
    noise_digit, noise_hd = build_model(digit_model.arch, 101), build_model(hd_model.arch, 102)
    unperturbed = [i for i, m in enumerate(test_set.gen_meta) if not m["perturbed"]]
    family = ("mnist", "half_deletion")
    effect, noise = [], []
    for i in sample_indices(len(test_set), 200, 0, unperturbed):
        x = test_set.images[i]
        post = task_posterior(x, family, (0.5, 0.5), 0.5)
        assert post.probs == pytest.approx((2 / 3, 1 / 3), abs=1e-15)
        effect.append(lambda_effect(x, [("mnist", digit_model), ("half_deletion", hd_model)], random,
                                    method, "predicted", post).magnitude)
        noise.append(lambda_effect(x, [("mnist", noise_digit), ("half_deletion", noise_hd)], random,
                                   method, "predicted", post).magnitude)
    e, b = float(np.mean(effect)), float(np.mean(noise))
    ok = e > 3 * b
    criterion_log(f"criterion 4.c {method}", ok, f"mean ||Lambda|| trained {e:.4f} vs random-model "
                                                 f"baseline {b:.4f}, ratio {e / b:.2f} (> 3)")
    assert ok


# --------------------------------------------------------------------------
# 5. GBP / VBP engine identities
# --------------------------------------------------------------------------

def test_criterion_5_relu_free_and_negative_chain(criterion_log):
    rng = np.random.default_rng(5)
    identical = True
    for seed in range(20):
        m = build_model(ArchSpec((conv(3, 3, 1, 1), pool(2), FLATTEN, fc(4)), (1, 6, 6), 4), seed)
        x = rng.random((1, 6, 6))
        identical &= np.array_equal(gbp(m, x).values, vbp(m, x).values)
    chain = build_model(ArchSpec((FLATTEN, fc(1), RELU, fc(1)), (1, 1, 1), 1), 0)
    chain.params["layer1.weight"].data = np.array([[1.0]])
    chain.params["layer3.weight"].data = np.array([[-1.0]])
    v, g = vbp(chain, np.ones((1, 1, 1))).values.item(), gbp(chain, np.ones((1, 1, 1))).values.item()
    ok = identical and v == -1.0 and g == 0.0
    criterion_log("criterion 5.identities", ok, f"ReLU-free models identical: {identical}; "
                                                f"negative-upstream chain VBP {v:+.1f}, GBP {g:+.1f}")
    assert ok


@pytest.mark.parametrize("name", TASKS)
def test_criterion_5_methods_differ_on_trained_models(experiment, criterion_log, name):
    manifest, _ = experiment(name)
    test_set = load_dataset(manifest.path("dataset_test"))
    model = load_model(manifest.path("model_trained"))
    idx = [int(i) for i in manifest.summary["report_images"].split(",")]
    images = test_set.images[idx]
    v = np.stack([m.values for m in saliency_batch(model, images, "VBP", "predicted")])
    g = np.stack([m.values for m in saliency_batch(model, images, "GBP", "predicted")])
    frac = float(np.mean(v != g))
    ok = frac >= 0.01
    criterion_log(f"criterion 5.{name}", ok, f"GBP and VBP differ at {100 * frac:.1f}% of pixels (>= 1%)")
    assert ok


# --------------------------------------------------------------------------
# 6. the effect estimator
# --------------------------------------------------------------------------

def test_criterion_6_estimator(criterion_log):
    arch = ArchSpec((FLATTEN, fc(2)), (1, 2, 2), 2)
    tagged = {t: dataclasses.replace(build_model(arch, 0), provenance=t) for t in ("a", "b", "random")}
    fixed = {"a": np.full((1, 1, 2, 2), 3.0), "b": np.full((1, 1, 2, 2), -1.5), "random": np.full((1, 1, 2, 2), 0.5)}

    def stub(model, x, method, target, label):
        return fixed[model.provenance]
    post = TaskPosterior(("a", "b"), (2 / 3, 1 / 3), (0.5, 0.5))
    res = lambda_effect(np.zeros((1, 2, 2)), [("a", tagged["a"]), ("b", tagged["b"])], tagged["random"],
                        "VBP", "max", post, saliency_fn=stub)
    hand = 2 / 3 * (3.0 - 0.5) + 1 / 3 * (-1.5 - 0.5)  # = 1.0
    exact = np.array_equal(res.lambda_map, np.full((1, 1, 2, 2), hand)) and np.array_equal(res.recompute(),
                                                                                         res.lambda_map)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        maps = {k: rng.normal(size=(1, 1, 4, 4)) for k in fixed}

        def rstub(model, x, method, target, label, maps=maps):
            return maps[model.provenance]
        p, q, alpha = rng.random(3)

        def lam(w):
            return lambda_effect(np.zeros((1, 4, 4)), [("a", tagged["a"]), ("b", tagged["b"])], tagged["random"],
                                 "VBP", "max", TaskPosterior(("a", "b"), (w, 1 - w), (0.5, 0.5)),
                                 saliency_fn=rstub).lambda_map
        blend = lam(alpha * p + (1 - alpha) * q)
        worst = max(worst, np.abs(blend - (alpha * lam(p) + (1 - alpha) * lam(q))).max())
    ok = exact and worst < 1e-13
    criterion_log("criterion 6", ok, f"stub weighted sum exact: {exact} (hand value {hand}); "
                                     f"linearity over 50 blends max |diff| {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 7. determinism
# --------------------------------------------------------------------------

def test_criterion_7_determinism(experiment, criterion_log, tmp_path):
    first, _ = experiment("half_deletion")
    cfg = dataclasses.replace(first.config, output_dir=str(tmp_path / "again"))
    second = run_experiment(cfg)
    names = ("report_aggregate", "report_records", "grid", "grid_signed")
    same = {n: first.path(n).read_bytes() == second.path(n).read_bytes() for n in names}
    ok = all(same.values())
    criterion_log("criterion 7", ok, "byte-identical across two runs: " +
                  ", ".join(f"{n} {'yes' if s else 'NO'}" for n, s in same.items()))
    assert ok
