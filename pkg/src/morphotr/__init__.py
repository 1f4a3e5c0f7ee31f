"""Batch-correcting encoder for morphological profiles.

A Hyena-operator encoder over continuous Cell Painting features with
source-context conditioning, trained through a three-stage curriculum,
plus classical baselines, an integration-metric suite and a CLI.
"""

__version__ = "0.1.0"
