"""Desk-scale two-stage face detector with multi-layer RoI feature
concatenation, hard-negative mining, multi-scale training, and FDDB-style
evaluation."""

__version__ = "0.1.0"
