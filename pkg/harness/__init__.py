"""Experiment harness: configuration, pipelines, sweeps and the CLI."""
