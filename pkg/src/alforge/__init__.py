"""alforge: a pool-based deep active-learning experiment engine.

Uncertainty-driven querying (MC-dropout / deep ensembles with entropy or
mutual-information acquisition) against a uniform-random baseline, with a
calibration / sparsification evaluation suite, all deterministic given a
master seed.
"""

__version__ = "0.1.0"
