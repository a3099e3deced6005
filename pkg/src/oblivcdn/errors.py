"""Exception types shared across the package."""


class OblivCdnError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(OblivCdnError, ValueError):
    """A caller passed arguments outside a function's documented domain."""


class UnknownKey(OblivCdnError, KeyError):
    """An oblivious lookup found no entry for the requested key."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown key"


class CapacityError(OblivCdnError):
    """A request needs more storage than the deployment was provisioned with."""


class StashOverflowError(OblivCdnError):
    """A stash ran out of free slots. Always fatal: indicates mis-sized parameters."""

    def __init__(self, r: int, needed: int, free: int, occupied: int, size: int):
        self.r = r
        self.needed = needed
        self.free = free
        self.occupied = occupied
        self.size = size
        super().__init__(
            f"stash overflow on r={r}: needed {needed} free slots, "
            f"{free} free, {occupied}/{size} occupied"
        )


class StaleEpochError(OblivCdnError):
    """A read referenced an epoch that is no longer live. Retryable."""

    retryable = True


class FrameError(OblivCdnError):
    """A wire frame or record failed to decode."""


class ProtocolError(OblivCdnError):
    """A peer sent a well-formed message that violates the protocol state."""


class DuplicateBatch(ProtocolError):
    """A token batch id was already executed; the replay is refused."""


class RemoteError(OblivCdnError):
    """A remote endpoint answered a request with an error frame."""

    def __init__(self, code: int, message: str):
        self.code = code
        self.message = message
        super().__init__(f"remote error {code}: {message}")


class EpochAborted(OblivCdnError):
    """A background epoch failed; the shadow copy was discarded."""


class ConfigError(OblivCdnError, ValueError):
    """A scenario or deployment configuration is invalid."""
