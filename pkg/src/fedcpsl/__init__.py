"""Personalized semi-supervised federated learning: FedCPSL and baselines."""
