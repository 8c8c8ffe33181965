"""Metric multi-camera extrinsic calibration from a person swinging a stick of known length."""

__version__ = "0.1.0"
