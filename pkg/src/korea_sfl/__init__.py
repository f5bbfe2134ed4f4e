"""KoReA-SFL: knowledge-replay split federated learning simulator."""

__version__ = "0.1.0"
