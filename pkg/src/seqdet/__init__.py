"""Temporal single-shot detection with attention-gated ConvLSTM memory,
tubelet identity tracking, and MOT/mAP evaluation on synthetic sequences."""

__version__ = "0.1.0"
