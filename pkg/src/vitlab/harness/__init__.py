"""Experiment orchestration: configs, datasets, training loops and the CLI."""
