"""Small-target tracking: sparse detector anchors, ROI-confined optical flow, color-space recovery."""
from .core import BBox, Detection, Frame, TrackerConfig, iou, cle
from .pipeline import TrackerMode, TrackRecord, run_sequence

__version__ = "0.1.0"
__all__ = ["BBox", "Detection", "Frame", "TrackerConfig", "iou", "cle", "TrackerMode", "TrackRecord",
           "run_sequence"]
