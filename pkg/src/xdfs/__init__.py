"""Parallel-channel file transfer stack.

Layers, bottom to top: wire (binary codec), transport (sockets and the
deterministic simulator), storage (positional streams and disk engines),
fsm (the four protocol machines), session (registry and handshake),
piod (the per-session dispatch loop), server (daemon runtime), client
(transfer API, url-copy CLI and bench harness).
"""

from .errors import InvariantViolation, XdfsError

__version__ = "0.1.0"

__all__ = ["InvariantViolation", "XdfsError", "__version__"]
