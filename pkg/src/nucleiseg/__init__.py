"""Unsupervised nuclei instance segmentation for stained histology images.

The pipeline works block by block: a data-driven color transform projects
each block's RGB pixels onto their first principal component, an adaptive
histogram threshold binarizes the projection, and a morphological refinement
loop turns the binary mask into instance labels.  An exact Aggregated
Jaccard Index evaluator, annotation ingestion, and a synthetic ground-truth
generator round out the toolkit.
"""

from nucleiseg.config import PipelineConfig
from nucleiseg.pipeline import SegmentationResult, segment_image

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "SegmentationResult", "segment_image", "__version__"]
