"""Coronary artery calcium scoring on non-contrast cardiac CT.

Candidate pixels above 130 HU inside a cardiac ROI are classified by a
small patch CNN, and the pixels it keeps are scored with the Agatston
method. A phantom generator supplies data with exact ground truth.
"""

__version__ = "0.1.0"
