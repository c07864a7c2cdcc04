"""Multi-granularity adversarial alignment for domain-adaptive anchor-free detection."""

__version__ = "0.1.0"
