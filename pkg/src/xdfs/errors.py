"""Exceptions shared across the protocol stack."""


class XdfsError(Exception):
    """Base class for all protocol-stack errors."""


class InvariantViolation(XdfsError, ValueError):
    """A value broke one of its declared field invariants."""
