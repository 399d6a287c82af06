"""Desk-scale cloud-edge collaborative transformer inference.

A splittable toy decoder-only transformer with confidence-gated early exits
on the edge, asynchronous contextual-data upload, a stateful cloud partition
with per-session KV caches, and a benchmark harness with exact byte/latency
accounting over a deterministic simulated link.
"""

__version__ = "0.1.0"
