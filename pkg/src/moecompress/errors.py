"""Exception hierarchy. Each class carries the process exit code used by the CLI."""


class MoeCompressError(Exception):
    exit_code = 1


class DimensionError(MoeCompressError, ValueError):
    exit_code = 2


class DomainError(MoeCompressError, ValueError):
    exit_code = 3


class ConfigError(MoeCompressError, ValueError):
    exit_code = 4


class FormatError(MoeCompressError):
    exit_code = 5


class HeaderError(FormatError):
    exit_code = 6


class VersionError(FormatError):
    exit_code = 7


class TruncatedError(FormatError):
    exit_code = 8


class ManifestError(FormatError):
    exit_code = 9
