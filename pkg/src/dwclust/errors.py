"""Exception types shared across the package.

The error model is fail-stop: anything that would silently corrupt a run
(non-finite intermediates, malformed wire data, a host dropping out) raises
immediately instead of being patched over.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Input violates a documented contract (shapes, ranges, feasibility)."""


class NumericalError(RuntimeError):
    """Non-finite or corrupted values showed up mid-computation."""


class ProtocolError(RuntimeError):
    """Malformed or out-of-order message on the coordinator/host wire."""


class StaleResultError(ProtocolError):
    """A host answered for a different round than the one in flight."""


class HostFailureError(RuntimeError):
    """A host became unreachable or reported an error; names the host."""

    def __init__(self, host_id: int, reason: str):
        super().__init__(f"host {host_id}: {reason}")
        self.host_id = host_id
        self.reason = reason
