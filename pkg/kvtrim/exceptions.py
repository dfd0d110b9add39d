class KVTrimException(Exception):
    pass


class ShapeException(KVTrimException, ValueError):
    pass


class ChannelIndexException(KVTrimException, IndexError):
    pass


class PreconditionException(KVTrimException, ValueError):
    pass


class ConsistencyException(KVTrimException, ValueError):
    pass


class NumericalException(KVTrimException, ArithmeticError):
    def __init__(self, message: str, iterations: int = 0):
        super().__init__(message)
        self.iterations = iterations


class FormatException(KVTrimException, ValueError):
    pass


class GuardException(KVTrimException, ValueError):
    pass


class ConfigException(KVTrimException, ValueError):
    pass
