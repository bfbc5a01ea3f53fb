# In fabricrpc/exceptions.py


class FabricError(Exception):
    """Root of every error raised by the package. `code` is a short stable tag."""

    code = "fabric_error"

    def __init__(self, detail: str, code: str | None = None):
        super().__init__(detail)
        self.detail = detail
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"[{self.code}] {self.detail}"


##### Transport #####

class VerbsError(FabricError):
    code = "verbs"


class OverflowFault(VerbsError):
    code = "unsignaled_overflow"


class AccessFault(VerbsError):
    code = "access_fault"


class UnknownZoneError(VerbsError):
    code = "unknown_zone"


class UnknownMachineError(VerbsError):
    code = "unknown_machine"


class ReceiverNotReadyError(VerbsError):
    code = "receiver_not_ready"


class RegistrationCapError(VerbsError):
    code = "registration_cap"


class DuplicateConnectionError(VerbsError):
    code = "duplicate_connection"


class CompletionQueueOverflow(VerbsError):
    code = "cq_overflow"


##### Memory #####

class AllocationError(FabricError):
    code = "allocation"


class OwnershipError(FabricError):
    code = "ownership"


##### Invocation #####

class SystemInitError(FabricError):
    code = "system_init"


class SerializationError(FabricError):
    code = "serialization"


class RegistryError(FabricError):
    code = "registry"


class ChannelError(FabricError):
    code = "channel"


class DrainTimeoutError(FabricError):
    code = "drain_timeout"


class ConfigError(FabricError):
    code = "config"
