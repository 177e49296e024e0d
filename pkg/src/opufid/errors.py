class OpufidError(Exception):
    pass


class InvalidParameterError(OpufidError, ValueError):
    pass


class OutOfRangeError(OpufidError, ValueError):
    pass


class DegenerateSegmentError(OpufidError, ValueError):
    pass


class EmptyOverlapError(OpufidError, ValueError):
    pass


class InsufficientEntropyError(OpufidError, ValueError):
    pass


class AcquisitionError(OpufidError, ValueError):
    pass


class ConflictError(OpufidError):
    pass


class StorageError(OpufidError, OSError):
    pass


class ParseError(OpufidError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
