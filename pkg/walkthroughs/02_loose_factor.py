"""
The loose factor on a loss curve
================================

ALO multiplies each batch's cross-entropy by
``gamma = min(loss[t - lag] / loss[t], 0.999)``. When the loss jumps up the
factor shrinks and the step is softened; when it falls the factor sits at
the clamp.
"""

import math

import numpy as np

from looseqa.losses import LooseState, gamma

# the worked example: previous loss 0.2, current loss 0.3
s = LooseState()
s.push(0.2)
g = gamma(s, 0.3)
print("gamma", g)
print("-log10(0.3) =", -math.log10(0.3), " loosened:", g * -math.log10(0.3))
print("in natural log the same sample costs", -math.log(0.3), "->", g * -math.log(0.3))

# a noisy, slowly falling loss curve
rng = np.random.default_rng(3)
curve = np.exp(-np.linspace(0, 2, 60)) * (1 + 0.3 * rng.standard_normal(60).clip(-0.9, 3))

for lag in (1, 5, 20):
    st = LooseState(lag=lag)
    gammas = np.array([gamma(st, c) for c in curve])
    clamped = int(np.sum(gammas == 0.999))
    print(f"lag={lag:2d}  mean gamma {gammas.mean():.3f}  min {gammas.min():.3f}  clamped {clamped}/60")

# a longer lag compares against older, usually larger losses, so the
# ratio exceeds one (and clamps) more often on a falling curve
