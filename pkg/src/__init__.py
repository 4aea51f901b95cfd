"""
Tube Linker
===========
Links per-frame region proposals into class-labelled action tubes with two
dynamic programs, and evaluates the tubes against ground truth.
"""

from .config_manager import (
    ConfigManager,
    EvalThresholds,
    IngestSettings,
    LinkerConfig,
    ScoringSettings,
    get_config,
    reload_config,
)
from .core_model import (
    ActionPath,
    ActionTube,
    BoundingBox,
    GroundTruthTube,
    InvariantError,
    PixelMask,
    RegionProposal,
    ValidationError,
    VideoProposals,
)
from .tube_builder import TubeLinker, link_video

__version__ = "1.0.0"
__all__ = [
    "ConfigManager",
    "EvalThresholds",
    "IngestSettings",
    "LinkerConfig",
    "ScoringSettings",
    "get_config",
    "reload_config",
    "ActionPath",
    "ActionTube",
    "BoundingBox",
    "GroundTruthTube",
    "InvariantError",
    "PixelMask",
    "RegionProposal",
    "ValidationError",
    "VideoProposals",
    "TubeLinker",
    "link_video",
]
