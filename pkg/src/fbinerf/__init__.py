"""Feature-based bundle-adjusting radiance field toolkit."""

__version__ = "0.1.0"
