"""Batch renderer for hybridfp snapshot and trajectory files."""

from .plots import PlotJob, main, read_manifest, read_snapshot_file, render

__version__ = "0.1.0"
