"""Knowledge-graph concept recognition with few-shot node addition."""

__version__ = "0.1.0"
