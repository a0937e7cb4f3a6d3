"""Built-in detectors and the subprocess bridge."""

from .base import Detector, DetectorError
from .bridge import BridgeDetector, BridgeError
from .pillar import PillarConfig, PillarDetector, PillarWeights
from .template import TemplateDetector, TemplateDetectorConfig

__all__ = ["BridgeDetector", "BridgeError", "Detector", "DetectorError", "PillarConfig", "PillarDetector",
           "PillarWeights", "TemplateDetector", "TemplateDetectorConfig"]
