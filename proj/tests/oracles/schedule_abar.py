# Cumulative product of (1 - beta) for a linear beta schedule.
import numpy as np

betas = np.linspace(1e-4, 0.02, 100)
abar = np.cumprod(1.0 - betas)
print(f"abar_1   = {abar[0]:.17g}")
print(f"abar_50  = {abar[49]:.17g}")
print(f"abar_100 = {abar[99]:.17g}")
