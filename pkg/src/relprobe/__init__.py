"""News-conditioned relation graphs + GAT trend classification, trained jointly."""

__version__ = "0.1.0"
