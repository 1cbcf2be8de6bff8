"""Exception hierarchy shared by all modules."""


class FoleyBridgeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FoleyBridgeError):
    """Invalid configuration (bad dimensions, unknown keys, missing providers)."""


class DomainError(FoleyBridgeError):
    """Scalar argument outside its legal range (e.g. diffusion time)."""


class ShapeError(FoleyBridgeError):
    """Tensor arguments with incompatible shapes."""


class NumericError(FoleyBridgeError):
    """Non-finite values or failed numerical decompositions."""


class PoolingError(FoleyBridgeError):
    """Video patch grid cannot be partitioned as requested."""


class GenerationError(FoleyBridgeError):
    """Synthetic clip generation cannot satisfy its constraints."""


class PairingError(FoleyBridgeError):
    """Paired metric called on sets that do not pair up."""


class ManifestError(FoleyBridgeError):
    """Malformed manifest (duplicate ids, missing records)."""


class InputError(FoleyBridgeError):
    """Malformed low-level input (empty waveform, missing file)."""


class IncompatibilityError(FoleyBridgeError):
    """Checkpoint/config hash mismatch."""
