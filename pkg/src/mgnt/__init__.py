"""Mesh graph network with a token-attention global processor, plus the data
oracles, training loop and metrics needed to exercise it end to end."""

__version__ = "0.1.0"
