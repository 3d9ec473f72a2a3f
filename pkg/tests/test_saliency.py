import numpy as np
import pytest

from causal_saliency.model import (
    FLATTEN, RELU, ArchSpec, Layer, UnsupportedArchitectureError, build_model, conv, fc, pool, predict,
)
from causal_saliency.saliency import (
    Target, gbp, normalize_map, saliency, saliency_batch, select_target, vbp,
)


def linear_model(k=3, hw=(4, 4), seed=0):
    m = build_model(ArchSpec((FLATTEN, fc(k)), (1, *hw), k), seed)
    m.params["layer1.bias"].data = np.random.default_rng(seed).normal(size=k)
    return m


def small_cnn(seed=0):
    arch = ArchSpec((conv(4, 3, 1, 1), RELU, pool(2), conv(4, 3, 1, 1), RELU, FLATTEN, fc(6), RELU, fc(3)),
                    (1, 6, 6), 3)
    m = build_model(arch, seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in m.params.items():
        if name.endswith("bias"):
            p.data = rng.normal(scale=0.1, size=p.shape)
    return m


def test_linear_model_map_is_weight_column():
    m = linear_model()
    x = np.random.default_rng(1).random((1, 4, 4))
    for target in (Target("max"), Target("explicit", 2)):
        s = vbp(m, x, target)
        expected = m.params["layer1.weight"].data[:, s.target_class].reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(s.values, expected)


def test_ignored_region_has_zero_saliency():
    m = linear_model()
    w = m.params["layer1.weight"].data.reshape(4, 4, 3)
    w[:2, :, :] = 0  # top two rows never reach the logits
    x = np.random.default_rng(2).random((1, 4, 4))
    assert not vbp(m, x).values[0, 0, :2].any()


def test_vbp_matches_finite_differences():
    m = small_cnn(3)
    x = np.random.default_rng(3).random((1, 6, 6))
    s = vbp(m, x)
    c, eps = s.target_class, 1e-6
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        numeric[idx] = (predict(m, xp)[0][0, c] - predict(m, xm)[0][0, c]) / (2 * eps)
    analytic = s.values[0]
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    assert err.max() < 1e-4


def test_gbp_equals_vbp_without_relus():
    m = linear_model(seed=4)
    x = np.random.default_rng(4).random((1, 4, 4))
    assert np.array_equal(gbp(m, x).values, vbp(m, x).values)


def relu_chain():
    m = build_model(ArchSpec((FLATTEN, fc(2), RELU, fc(1)), (1, 1, 2), 1), 0)
    m.params["layer1.weight"].data = np.eye(2)
    m.params["layer3.weight"].data = np.array([[1.0], [-1.0]])
    return m


def test_gbp_zeroes_negative_upstream():
    m = relu_chain()
    x = np.ones((1, 1, 2))
    np.testing.assert_array_equal(vbp(m, x).values.ravel(), [1.0, -1.0])
    np.testing.assert_array_equal(gbp(m, x).values.ravel(), [1.0, 0.0])


def test_positive_network_gbp_equals_vbp():
    m = small_cnn(5)
    for p in m.params.values():
        p.data = np.abs(p.data)
    x = np.random.default_rng(5).uniform(0.05, 1, (1, 6, 6))
    assert np.array_equal(gbp(m, x).values, vbp(m, x).values)


def test_gbp_support_within_vbp_support_on_unbranched_chain():
    # diagonal dense layers: every pixel reaches the logit through a single path
    d = 16
    arch = ArchSpec((FLATTEN, fc(d), RELU, fc(d), RELU, fc(d), RELU, fc(1)), (1, 4, 4), 1)
    rng = np.random.default_rng(6)
    for trial in range(20):
        m = build_model(arch, trial)
        for i in (1, 3, 5):
            m.params[f"layer{i}.weight"].data = np.diag(rng.normal(size=d))
            m.params[f"layer{i}.bias"].data = rng.normal(scale=0.1, size=d)
        x = rng.normal(size=(1, 4, 4))
        v, g = vbp(m, x).values, gbp(m, x).values
        assert not (g != 0)[v == 0].any()
        np.testing.assert_array_equal(g[g != 0], v[g != 0])


def test_gbp_rejects_non_relu_model():
    m = linear_model()
    arch = object.__new__(ArchSpec)
    object.__setattr__(arch, "layers", (FLATTEN, Layer("tanh"), fc(3)))
    object.__setattr__(arch, "input_shape", (1, 4, 4))
    object.__setattr__(arch, "num_classes", 3)
    m.arch = arch
    with pytest.raises(UnsupportedArchitectureError):
        gbp(m, np.zeros((1, 4, 4)))


def test_explicit_class_out_of_range():
    with pytest.raises(ValueError):
        vbp(linear_model(), np.zeros((1, 4, 4)), Target("explicit", 3))


def test_methods_share_forward_pass():
    m = small_cnn(7)
    x = np.random.default_rng(7).random((1, 6, 6))
    assert np.array_equal(vbp(m, x).logits, gbp(m, x).logits)


def test_maps_are_deterministic():
    m = small_cnn(8)
    x = np.random.default_rng(8).random((1, 6, 6))
    assert gbp(m, x).values.tobytes() == gbp(m, x).values.tobytes()


def test_batch_equals_single():
    m = small_cnn(9)
    xs = np.random.default_rng(9).random((5, 1, 6, 6))
    batch = saliency_batch(m, xs, "GBP", "true", [0, 1, 2, 0, 1], chunk=2)
    for i in range(5):
        single = saliency(m, xs[i], "GBP", "true", [0, 1, 2, 0, 1][i])
        np.testing.assert_allclose(batch[i].values, single.values, rtol=0, atol=1e-15)
        assert batch[i].target_class == single.target_class


# -- target selection & normalization ------------------------------------------

def test_select_target():
    assert select_target([1, 3, 2], "predicted") == 1
    assert select_target([5, 5], "predicted") == 0
    assert select_target([1, 3, 2], "true", 7) == 7
    assert select_target([1, 3, 2], Target("explicit", 2)) == 2
    with pytest.raises(ValueError):
        select_target([1, 2], "true")


def _map(values):
    m = vbp(linear_model(k=1, hw=(1, len(values))), np.zeros((1, 1, len(values))))
    m.values = np.asarray(values, dtype=float).reshape(1, 1, 1, -1)
    return m


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_map(_map([-2, 4]), "abs-maxnorm").values.ravel(), [0.5, 1.0])
    np.testing.assert_array_equal(normalize_map(_map([-2, 4]), "signed-maxnorm").values.ravel(), [-0.5, 1.0])
    z = normalize_map(_map([0, 0]), "abs-maxnorm")
    assert not z.values.any() and z.normalization == "abs-maxnorm"


@pytest.mark.parametrize("mode", ["none", "abs-maxnorm", "signed-maxnorm"])
def test_normalize_idempotent(mode):
    once = normalize_map(_map([-3.0, 0.5, 2.0]), mode)
    assert np.array_equal(normalize_map(once, mode).values, once.values)
