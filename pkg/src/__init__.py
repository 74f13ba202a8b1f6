"""Cloud overlay QoS: forwarding, caching and cross-stream coding over a DC overlay."""

__version__ = "0.1.0"
