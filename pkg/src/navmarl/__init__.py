"""Multi-agent route learning on road graphs with oracle-guided demonstrations."""

__version__ = "0.1.0"
