"""NP-FKGC engine: few-shot knowledge graph completion with neural processes and normalizing flows."""

__version__ = "1.0.0"
