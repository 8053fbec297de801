"""Population-aware cross-dataset evaluation for multi-channel time-series classification.

Subpackages cover the full pipeline: montage alignment, spectro-temporal
preprocessing, corpus handling with a synthetic generator, frame-level
classifiers, the train/test enumeration and nested cross-validation engine,
patient-level analytics, and a finite-instance sandbox for the mixture-risk
bounds that motivate multi-population training.
"""

__version__ = "0.1.0"
