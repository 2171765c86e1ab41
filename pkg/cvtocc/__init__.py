"""Temporal cost-volume refinement of 3D semantic occupancy, trained on synthetic scenes."""

from cvtocc.constants import VERSION

__version__ = VERSION
