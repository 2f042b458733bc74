"""Sparsely supervised flow matching at desk scale.

Masked regression losses for flow-matching models, their effect on the data
covariance spectrum, closed-form score and denoiser oracles, and a
triangle/square benchmark with spatial-consistency, memorization and
gradient-sensitivity metrics.
"""

__version__ = "0.1.0"
