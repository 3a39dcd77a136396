class LpfError(Exception):
    pass


class DuplicateName(LpfError):
    pass


class InitFailure(LpfError):
    pass


class UnknownModule(LpfError):
    pass


class InvalidPeriod(LpfError, ValueError):
    pass


class NamingUnavailable(LpfError):
    pass


class UnroutableMessage(LpfError):
    pass


class RemoteUnreachable(LpfError):
    pass


class TaskCancelled(LpfError):
    pass
