"""Adaptive metamorphic testing: hierarchical contextual bandits that learn
which metamorphic relations, and which parameters, reveal faults."""

from .bandit import BanditCore, ExplorationConfig, Observation
from .campaign import CampaignConfig, run, run_amt, run_baseline, run_boundary, run_random
from .hierarchy import HierarchyState, RelationChoice
from .images import RasterImage
from .relations import MR, BoundingBox, apply_mr, transform_boxes
from .verdicts import Verdict

__version__ = "0.1.0"
