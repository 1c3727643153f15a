"""Grouped-mask student-teacher pre-training for grayscale radiographs, with
probing, fine-tuning, segmentation and representation-quality evaluation."""

__version__ = "0.1.0"
