"""Straight-line recomputation of small fixed networks used in the unit tests."""
import numpy as np

relu = lambda z: np.maximum(z, 0)

# 2-layer ReLU net
W1 = np.array([[1.0, -2.0], [0.5, 1.0], [-1.0, 0.25]])
b1 = np.array([0.1, -0.2, 0.3])
W2 = np.array([[1.0, 2.0, -1.0], [0.5, -0.5, 0.25]])
b2 = np.array([0.05, -0.1])
x = np.array([0.3, -0.7])
h = relu(W1 @ x + b1)
y = W2 @ h + b2
print("hidden", repr(h.tolist()))
print("output", repr(y.tolist()))

# same net with a rank-1 adapter on layer 0, scale 2
a = np.array([[0.1], [-0.2], [0.3]])
b = np.array([[0.4, -0.5]])
h2 = relu((W1 + 2.0 * a @ b) @ x + b1)
y2 = W2 @ h2 + b2
print("adapter output", repr(y2.tolist()))
