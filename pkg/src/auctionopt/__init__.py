"""Constrained optimization of stochastic GSP auction mechanisms.

The package replays logged ad-search auctions under a grid of ranking-function
parameters, calibrates predicted CTRs against realized clicks, and solves an
entropy-regularized, linearly constrained revenue-maximization program whose
solution is a per-category probability distribution over the parameter grid.

Subpackages / modules:

- ``datagen``      synthetic replay and impression logs with known ground truth
- ``calibration``  per-position isotonic CTR calibration maps
- ``auction``      ranking score, GSP infimum pricing, single-auction replay
- ``simulator``    parameter grids, coefficient tables, business metrics
- ``optimizer``    augmented-Lagrangian solver over per-category simplices
- ``policy``       stochastic mechanism policy: sampling, serving, evaluation
- ``pipeline``     end-to-end experiment orchestration
- ``cli``          command-line entry points

Set ``AUCTIONOPT_NUMBA=0`` to disable the numba-compiled replay kernel and run
the pure-Python fallback instead (see ``auctionopt._kernels``).
"""

__version__ = "0.1.0"
