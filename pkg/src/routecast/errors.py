"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class ConfigError(ValueError):
    """A configuration value violates a declared constraint."""


class FormatError(ValueError):
    """A file does not conform to one of the on-disk formats."""


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact is absent from the run directory."""


class DivergenceError(RuntimeError):
    """A training stage tripped its divergence guard."""
