"""Joint stereo video deblurring, piecewise-rigid scene flow and moving-object segmentation."""

__version__ = "0.1.0"
