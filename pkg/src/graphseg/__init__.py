"""Weakly supervised joint segmentation and classification of tissue rasters
using superpixel graphs, gradient-based node attribution, and pseudo-labeled
node classification."""

__version__ = "0.1.0"
