"""Guidance microservice: noise prediction and embeddings over HTTP."""

__version__ = "0.1.0"
