"""Cross-view (exo/ego) imitation-error detection: align, fuse, detect."""

__version__ = "0.1.0"
