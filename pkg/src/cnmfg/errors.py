"""Semantic exception hierarchy for the cnmfg package."""

from __future__ import annotations


class CnmfgError(Exception):
    """Base class for all package errors."""


class MeasureError(CnmfgError):
    """Invalid or incompatible empirical measures (supports, grids)."""


class ModelError(CnmfgError):
    """Invalid model specification or cost structure."""


class SimulationError(CnmfgError):
    """Forward simulation failure (non-finite states, bad dimensions)."""

    def __init__(self, message: str, *, step: int | None = None, path: int | None = None, particle: int | None = None):
        super().__init__(message)
        self.step = step
        self.path = path
        self.particle = particle


class SolverError(CnmfgError):
    """Solver failure (non-contraction, stall, iteration cap) with diagnostics attached."""

    def __init__(self, message: str, *, history: dict | None = None):
        super().__init__(message)
        self.history = history or {}


class ConfigError(CnmfgError):
    """Configuration parse/validation failure; names the offending field when known."""

    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(message)
        self.field = field
