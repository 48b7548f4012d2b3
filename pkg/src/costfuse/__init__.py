"""Color/shape/texture dictionary features with score-level fusion.

The package learns per-subtype sparse dictionaries from constrained synthetic
images, encodes any image as a vector of distances to per-class code-space
centroids, classifies with a small neural network, fuses those scores with a
task-specific backend classifier, and evaluates verification (ROC, GAR@FAR)
and identification (CMC) protocols.
"""

__version__ = "0.1.0"
