"""
Exception hierarchy for rectdiff.

Every error carries a short ``category`` string; the CLI prints it in a
one-line ``error[<category>]: <message>`` form so callers can parse failures.
"""


class RectDiffError(Exception):
    """Base class for all errors raised by rectdiff."""
    category = "error"


class ShapeError(RectDiffError):
    category = "shape"

    @classmethod
    def mismatch(cls, op: str, a, b) -> "ShapeError":
        return cls(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class IndexRangeError(RectDiffError):
    category = "index"


class AddressError(RectDiffError):
    """A modulation offset names a layer the denoiser cannot modulate."""
    category = "address"


class AutodiffError(RectDiffError):
    category = "autodiff"


class ConfigError(RectDiffError):
    category = "config"


class ContainerError(RectDiffError):
    category = "container"


class DatasetError(RectDiffError):
    category = "dataset"


class DivergenceError(RectDiffError):
    category = "divergence"


class MissingCheckpointError(RectDiffError):
    category = "missing"


class ImageFormatError(RectDiffError):
    category = "format"


class FrozenParamsError(RectDiffError):
    """A frozen denoiser changed during a run that must not touch it."""
    category = "frozen"
