"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A precondition of an exported operation was not met."""


class ConfigError(Exception):
    """A run configuration is invalid or references missing inputs."""
