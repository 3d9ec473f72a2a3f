"""Vanilla vs guided backpropagation on the smallest network where they differ.

Run:  python3 demos/01_guided_relu.py
"""
import numpy as np

from causal_saliency.model import FLATTEN, RELU, ArchSpec, build_model, fc
from causal_saliency.saliency import gbp, vbp
from causal_saliency.tensor import Tensor, dense, grad_check, relu, tensor_sum

# A two-pixel input, an identity hidden layer, then a readout that likes the
# first unit and dislikes the second.
net = build_model(ArchSpec((FLATTEN, fc(2), RELU, fc(1)), (1, 1, 2), 1), seed=0)
net.params["layer1.weight"].data = np.eye(2)
net.params["layer3.weight"].data = np.array([[1.0], [-1.0]])

x = np.ones((1, 1, 2))
print("input            ", x.ravel())
print("VBP (gradient)   ", vbp(net, x).values.ravel())
# The readout sends a negative gradient into the second hidden unit; the
# guided rule drops it at the ReLU, so only the first pixel keeps saliency.
print("GBP (guided rule)", gbp(net, x).values.ravel())

# The vanilla rule is an honest gradient, which central differences confirm.
w, b = Tensor(np.array([[0.7, -1.2], [0.4, 0.9]])), Tensor(np.array([0.1, -0.2]))
err = grad_check(lambda t: tensor_sum(relu(dense(t, w, b))), np.array([[0.5, 1.5]]))
print(f"vanilla rule vs finite differences, max relative error: {err:.1e}")

# With every weight and bias non-negative no upstream gradient is ever
# negative, and the two maps coincide.
for p in net.params.values():
    p.data = np.abs(p.data)
print("all-positive net, maps equal:", np.array_equal(vbp(net, x).values, gbp(net, x).values))
