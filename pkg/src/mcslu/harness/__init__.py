"""Experiment harness: configuration, runners, reporting, and the CLI."""
