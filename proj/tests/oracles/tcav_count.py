# Brute-force TCAV count for a fixed set of 5 logit gradients and one CAV.
import numpy as np

grads = np.array([
    [0.5, -0.2, 0.1],
    [-0.3, 0.4, 0.0],
    [0.2, 0.2, 0.2],
    [-0.1, -0.1, 0.05],
    [1.0, -1.0, 0.3],
])
v = np.array([0.6, 0.0, 0.8])
v = v / np.linalg.norm(v)
dots = grads @ v
print("dots", dots)
print("positive", int((dots > 0).sum()), "TS", (dots > 0).mean())
