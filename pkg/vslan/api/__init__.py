"""API package for the mock entailment scorer."""
