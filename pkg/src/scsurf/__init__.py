"""Joint neural-SDF surface reconstruction and camera pose refinement from
sparse calibrated views with noisy pose initializations."""

__version__ = "0.1.0"
