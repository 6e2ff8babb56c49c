"""SPFL federated-learning poisoning workbench."""

__version__ = "0.1.0"
