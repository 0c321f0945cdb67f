"""Exception hierarchy shared by every stage."""


class ContractViolation(Exception):
    """A documented precondition or invariant was broken by the caller."""


class ConfigError(Exception):
    """Bad configuration or usage. ``pointer`` is a JSON pointer to the key."""

    def __init__(self, message, pointer=""):
        super().__init__(message)
        self.pointer = pointer


class CheckpointError(ContractViolation):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass
