"""Toolkit for turning the MITRE ATT&CK knowledge base into a Q&A dataset,
fine-tuning data, and a retrieval-augmented Q&A service."""

__version__ = "0.1.0"
