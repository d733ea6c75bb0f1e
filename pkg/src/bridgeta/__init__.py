"""Teacher-assistant knowledge distillation for camera-only BEV segmentation."""

__version__ = "0.1.0"
