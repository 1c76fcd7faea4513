"""branchlab: a numerical laboratory for supercritical branching mechanisms,
their skeleton branching Brownian motion, and the fluctuations of the
associated additive martingales.

Modules
-------
mechanism   branching-mechanism algebra, normalization, condition checks
skeleton    offspring law of the embedded branching Brownian motion
simulate    event-driven and exact-transition simulators
analytic    cumulant flows, fixed-point CF solve, exact fluctuation CFs
limits      stable laws, fluctuation regimes, normalizers, mixture samplers
lab         experiment orchestration, ECF/KS statistics, reports
"""

__version__ = "0.1.0"

from . import analytic, lab, limits, mechanism, simulate, skeleton  # noqa: F401
