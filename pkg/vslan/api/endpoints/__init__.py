"""API endpoints package."""
