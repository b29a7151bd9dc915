"""Text-to-map localization on rasterized OpenStreetMap tiles."""
__version__ = "0.1.0"

from .localizer import Localization, TextToMapLocalizer
from .matching import TileRetriever
from .pose import GridPoseEstimator

__all__ = ["Localization", "TextToMapLocalizer", "TileRetriever", "GridPoseEstimator", "__version__"]
