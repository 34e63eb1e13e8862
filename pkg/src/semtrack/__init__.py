"""Few-shot segmentation by semantic tracking over a frozen promptable tracker."""

__version__ = "0.1.0"
