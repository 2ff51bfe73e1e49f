"""Terrain-aware low-altitude path planning at desk scale.

Pipeline: procedural terrain -> sampling-based expert planner -> rendered
demonstration dataset -> multi-head policy trained with behavior cloning plus
terrain self-supervision -> closed-loop evaluation against a pure-BC baseline.
"""

__version__ = "0.1.0"
