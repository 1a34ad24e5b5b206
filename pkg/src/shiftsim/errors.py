"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was invoked outside its documented contract."""


class ConfigError(ValueError):
    """Invalid run, model, or workload configuration."""


class CacheOverflow(ContractViolation):
    """KV cache append past the preallocated capacity."""
