"""Instrumentation counters for cost accounting of forwards, backwards, and router reads."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class CostCounters:
    """Mutable counters threaded through forward/backward entry points.

    ``forward_passes`` counts batch forwards (dense or MoE), ``backward_passes``
    counts gradient computations, and ``router_reads`` counts per-layer reads of
    router weight matrices (only learned routing reads them).
    """

    forward_passes: int = 0
    backward_passes: int = 0
    router_reads: int = 0

    def add(self, other: "CostCounters") -> None:
        self.forward_passes += other.forward_passes
        self.backward_passes += other.backward_passes
        self.router_reads += other.router_reads

    def as_dict(self) -> dict:
        return {
            "forward_passes": self.forward_passes,
            "backward_passes": self.backward_passes,
            "router_reads": self.router_reads,
        }
