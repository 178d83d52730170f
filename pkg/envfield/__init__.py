"""Learned reaching-distance fields for path planning.

A field network maps a goal and a query location to a value that grows as
the location gets closer to the goal; agents plan by climbing it.

The toolkit provides:
- Random mazes on occupancy grids and synthetic furnished rooms
- Exact distance oracles (fast marching, 8-connected Dijkstra, BFS hops)
- A small reverse-mode network engine with Adam, written on numpy
- Field variants for a fixed goal, any goal, grid context and hypernetworks
- Greedy, gradient, multi-agent and pose-aware 3D planners
- RRT and PRM baselines, a scene-conditioned accessible-region VAE
- Benchmark suites, heatmap and contour renderings, and a command line

License: MIT
"""

from .version import __version__

__all__ = ["__version__"]
