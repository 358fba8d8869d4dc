"""Measure and mitigate shift variance in fully convolutional heatmap detectors."""

__version__ = "0.1.0"
