"""Typed harness errors; class names travel in protocol error replies."""


class HarnessError(Exception):
    pass


class SpecError(HarnessError):
    pass


class ModuleLoadError(HarnessError):
    pass


class InputGenError(HarnessError):
    pass


class DeviceError(HarnessError):
    pass


class ProtocolError(HarnessError):
    pass
