"""Federated learning under heterogeneous links and local computation."""
