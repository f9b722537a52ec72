"""Multi-teacher co-distillation of a ViT student from frozen heterogeneous teachers."""

__version__ = "0.1.0"
