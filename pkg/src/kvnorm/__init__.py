"""Toy decoder-only transformer with L2-norm based KV-cache eviction.

Keys with a small L2 norm tend to receive large attention; evicting the
largest-norm keys first compresses the cache without reading attention
scores. The package bundles the model, the eviction policies, attention-loss
analysis and synthetic retrieval workloads.
"""

__version__ = "0.1.0"
