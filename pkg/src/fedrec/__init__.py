"""Blockchain-evidenced federated recommendation with a D3QN reverse auction."""

__version__ = "0.1.0"
