"""Shared error types for contract violations that span modules."""


class CoverageError(ValueError):
    """A required class, variant, or table cell is missing."""


class BalanceError(ValueError):
    """A benchmark's modality-balance structure is violated."""
