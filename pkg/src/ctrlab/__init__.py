"""Multi-domain CTR laboratory.

A masked mixture-of-experts click-through-rate model whose per-domain
expert subsets are chosen dynamically from prototype-based domain
distances by a decaying epsilon-greedy selector.
"""

__version__ = "0.1.0"
