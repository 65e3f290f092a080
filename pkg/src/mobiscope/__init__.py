"""Epidemic-mobility panel analytics toolkit.

Subpackages cover the full pipeline: data model (`core`), CSV ingestion
(`ingest`), mobility measures (`mobility`), DTW time-series clustering
(`tsclust`), regression and correlation analyses (`inference`), synthetic
control estimation (`synthctl`), and a synthetic-city generator with planted
ground truth (`simgen`). The `cli` module orchestrates everything.
"""

__version__ = "0.1.0"
