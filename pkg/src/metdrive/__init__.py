"""Desk-scale end-to-end driving stack: ego-state time-series encoding,
sensor fusion, GRU waypoint decoding, a consistency loss over half-window
predictions, and a synthetic closed-loop world for training and scoring.
"""

__version__ = "0.1.0"
