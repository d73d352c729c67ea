"""Cooperative multi-agent report generation (Planner, Normality and Abnormality Writers)."""

__version__ = "0.1.0"
