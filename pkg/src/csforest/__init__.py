"""Causal survival forests."""
