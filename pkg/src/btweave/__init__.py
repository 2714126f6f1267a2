"""Behavior-tree mission modeling, verification and simulation for pipeline-inspection AUVs."""

__version__ = "0.1.0"
