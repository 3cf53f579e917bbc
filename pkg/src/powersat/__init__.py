"""Power plant type and cooling classification from 10-band satellite patches.

Pipeline stages: catalog + raster ingestion into georeferenced patches,
dataset construction (splits, normalization, balanced sampling), a small-stem
residual CNN, SGD training with transfer initialization, uncertainty-quantified
confusion-matrix evaluation, and class-activation-map explanations. A synthetic
scene generator provides desk-scale fixtures for the whole chain.
"""

__version__ = "0.1.0"
