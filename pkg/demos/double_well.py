"""Map the landscape of E(x) = x^4 - x^2 and print its disconnectivity graph.

    python3 demos/double_well.py
"""

import numpy as np

from dtriangle.landscape import LandscapeConfig, double_well, map_landscape

starts = np.random.default_rng(0).uniform(-1.5, 1.5, (200, 1))
basins, graph = map_landscape(double_well, starts, LandscapeConfig())

for b, (x, e) in enumerate(zip(basins.minima[:, 0], basins.energies)):
    print(f"minimum {b}: x = {x:+.5f}  E = {e:.5f}  members = {basins.counts[b]}")
for m in graph.to_dict()["merges"]:
    print(f"node {m['node']} joins {m['a']} and {m['b']} at E = {m['height']:.5f}")
print(graph.to_dot())
