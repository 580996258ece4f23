"""Bridge from image folders to the anomaly toolkit's data formats.

Runs images through a frozen pretrained convolutional backbone at several
input resolutions and writes the intermediate feature maps as ADFT files
plus a JSON manifest, ready for training and scoring by the density
toolkit.
"""

from .adft import read_adft, write_adft
from .backbone import BackboneFeatures, cumulative_block_count
from .export import ExporterConfig, export, verify

__version__ = "0.1.0"
