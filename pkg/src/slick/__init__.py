"""Part-aware car-damage instance segmentation with teacher-student distillation."""

__version__ = "0.1.0"
