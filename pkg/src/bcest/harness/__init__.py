"""Experiment driver: graph construction, estimators, metrics, CLI."""
