"""Palm-vein verification: preprocessing, an attention CNN trained with a
combined classification/matching loss, cosine matching with an adaptive
threshold, and an evaluation harness."""

__version__ = "0.1.0"
