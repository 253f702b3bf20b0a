"""
Sampling the double-integrator benchmark
========================================

A point mass starts near the origin, accelerates along two fixed headings
and is then steered back home.  Around (5, 5) the velocity noise is strong,
so headings that cross that area lose paths out of the safe box.  This
script compares the initial safe control with one aimed at the noise bump.
"""

import numpy as np

from safelearn import benchmark_control, benchmark_regions, benchmark_system, integrate_paths

system = benchmark_system()
regions = benchmark_regions()

controls = {
    "initial": (-np.pi / 3, np.pi / 3),
    "towards bump": (np.pi / 4, np.pi / 4),
}

for name, theta in controls.items():
    batch = integrate_paths(system, benchmark_control(theta), q=500, n_steps=500, seed=0)
    pos = batch.states[:, :, :2]
    # pathwise survival: never left the box up to the horizon
    inside = regions.safe_indicator(pos) >= 0
    survived = np.logical_and.accumulate(inside, axis=1)[:, -1].mean()
    home = (regions.reset_indicator(batch.positions_at(20.0)) >= 0).mean()
    print(f"{name:>13}  theta={np.round(theta, 3)}  "
          f"survival={survived:.3f}  back in reset disk at T={home:.3f}")

# the spread of the endpoint of the exploration phase shows the noise bump
for name, theta in controls.items():
    batch = integrate_paths(system, benchmark_control(theta), q=500, n_steps=500, seed=1)
    end = batch.positions_at(6.0)
    print(f"{name:>13}  mean position at t=6: {end.mean(axis=0).round(2)}  "
          f"std: {end.std(axis=0).round(2)}")
