"""Exception types for file formats and configuration."""


class FormatError(ValueError):
    """A file does not follow its declared binary or text layout."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class DigestMismatchError(FormatError):
    pass


class OverlappingOffsetsError(FormatError):
    pass


class ConfigError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    def __init__(self, name, expected, got):
        super().__init__(f"{name}: expected shape {tuple(expected)}, checkpoint has {tuple(got)}")
        self.name = name
        self.expected = tuple(expected)
        self.got = tuple(got)
