"""knnlab: a nearest-neighbor scaling-law laboratory.

Exact brute-force k-NN classification, dominance-based diagnostics of when
nearest neighbors learn fast or stall, closed-form bound evaluators with Monte
Carlo verification, and a reproducible experiment harness for two-phase
learning curves on synthetic product distributions and IDX image data.
"""

__version__ = "0.1.0"
