"""Average performance, fairness and worst-case accuracy of three toy models.

Each model is described only by its accuracy on three equally sized client test
sets. A higher average does not imply a fairer model: w2 matches w1 on average
but spreads its accuracy less, and w3 beats both on average and on its weakest
client.
"""

import numpy as np

from fedkf.metrics import AccuracyProfile, amp, check_afl_bounds, fm, wlp

profiles = {
    "w1": [0.6, 0.7, 0.8],
    "w2": [0.65, 0.65, 0.8],
    "w3": [0.7, 0.8, 0.9],
}

print(f"{'model':6s} {'AMP':>6s} {'FM':>9s} {'WLP':>6s}")
for name, acc in profiles.items():
    p = AccuracyProfile.equal_sizes(acc)
    print(f"{name:6s} {amp(p):6.3f} {fm(p):9.5f} {wlp(p):6.3f}")

# Any reweighting of the clients is a convex combination of their accuracies,
# so no mixture of client distributions can score below the worst client.
p = AccuracyProfile.equal_sizes(profiles["w1"])
report = check_afl_bounds(p, num_mixtures=5000, seed=0)
print(f"\nlowest accuracy over {report.num_mixtures} random client mixtures: {report.min_mp:.4f}")
print(f"worst client: {report.wlp:.4f}; bound holds: {report.holds}")

# Unequal test sets: AMP weights clients by test size, FM does not.
q = AccuracyProfile(np.array([0.5, 0.9]), np.array([10, 30]))
print(f"\nsizes (10, 30), acc (0.5, 0.9): AMP {amp(q):.3f}, FM {fm(q):.3f}")
