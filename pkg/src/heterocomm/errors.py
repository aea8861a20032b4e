"""Exception hierarchy shared by every layer of the package."""


class HeteroCommError(Exception):
    """Base class for all errors raised by heterocomm."""


class InputError(HeteroCommError, ValueError):
    """A caller passed arguments that violate an operation's preconditions."""


# wire
class EncodingError(HeteroCommError):
    pass


class ProtocolError(HeteroCommError):
    """Malformed frame or a message that breaks the protocol contract."""


class IncompleteFrameError(ProtocolError):
    """The byte source ended before a full frame was read."""


class DataError(HeteroCommError):
    """A tensor payload is inconsistent or carries non-finite values."""


# rendezvous
class RendezvousError(HeteroCommError):
    pass


class RegistrationError(RendezvousError):
    pass


class NotFoundError(RendezvousError, KeyError):
    pass


class BarrierError(RendezvousError):
    pass


# collectives
class CollectiveError(HeteroCommError):
    pass


class TransportError(CollectiveError):
    pass


# training / harness
class SetupError(HeteroCommError):
    pass


class ConfigError(HeteroCommError, ValueError):
    pass


class ExperimentError(HeteroCommError):
    """One or more rank workers failed; ``failures`` maps rank to the error."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})
