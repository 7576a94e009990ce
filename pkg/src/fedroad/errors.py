"""Shared exception types used across the package."""


class ShapeError(ValueError):
    """Tensor shapes or dimensions do not line up."""


class DomainError(ValueError):
    """A numeric argument is outside its mathematical domain."""


class InputError(ValueError):
    """A structurally invalid input (missing modality, empty batch, ...)."""


class FormatError(ValueError):
    """A serialized blob or file does not match its wire format."""


class ConfigError(ValueError):
    """An experiment configuration is invalid; message names the key."""


class ProtocolError(RuntimeError):
    """Federated protocol state violation (mismatched updates, ...)."""
