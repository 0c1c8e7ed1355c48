"""Region-graph embeddings and geospatial benchmarks at desk scale."""

__version__ = "0.1.0"
