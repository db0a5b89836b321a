"""Equilibrium metrics for supply-demand networks on weighted graphs.

Core pieces: hexagonal city graphs with geodesic transport costs
(:mod:`gemkit.graph`), the neighborhood-restricted unbalanced transport
metric and its equilibrium maps (:mod:`gemkit.gem`), comparison distances
(:mod:`gemkit.baselines`), value-augmented bipartite order dispatch
(:mod:`gemkit.dispatch`), a discrete-time supply-demand simulator
(:mod:`gemkit.simulator`), and prediction / switchback policy evaluation
(:mod:`gemkit.evaluation`).
"""

__version__ = "0.1.0"
