"""Domain-adaptive person search on a synthetic two-domain world, in numpy."""

__version__ = "0.1.0"
