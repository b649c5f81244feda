"""
Probabilistic keypoints
=======================

The network scores every streamline point against ``K`` keypoint classes.
A softmax with temperature gives ``p(k | x)``; normalizing each column
gives ``p(x | k)``, and each keypoint is the expectation of the point
coordinates under that column.  Keypoints are therefore convex
combinations of the input points.
"""
import numpy as np
from scipy.spatial import Delaunay

from tractreg import detect_keypoints, gen_phantom, init_params
from tractreg.network import generalized_softmax

phantom = gen_phantom(3, seed=0, n_streamlines=100)
params = init_params(n_keypoints=16, hidden=32, layers=2, temperature=0.6, seed=0)

kp = detect_keypoints(phantom, params)
inside = Delaunay(phantom.coords).find_simplex(kp) >= 0
print(f"{len(kp)} keypoints, all inside the convex hull of the input: {inside.all()}")

# Lower temperatures sharpen the class assignment of each point
logits = np.random.default_rng(1).normal(size=(5, 4))
for t in (2.0, 0.6, 0.1):
    print(f"t={t:3.1f}  mean max probability {generalized_softmax(logits, t).max(axis=1).mean():.3f}")
