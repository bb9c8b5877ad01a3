"""Models package for data structures."""
