'''
Exceptions raised across the library and the harness.
'''


class CbnError(Exception):
    '''Base class for all library errors.'''


class ShapeError(CbnError):
    '''Operands have incompatible extents or an axis is out of range.'''


class GraphError(CbnError):
    '''A network graph does not compose or a batch does not fit it.'''


class StateError(CbnError):
    '''A stateful object is used out of order or against the wrong layer.'''


class IntegrityError(CbnError):
    '''Stored data no longer matches its recorded content hash.'''


class ArgumentError(CbnError, ValueError):
    '''An argument is outside its documented range.'''


class ConfigError(CbnError, ValueError):
    '''An experiment config is malformed or has unknown keys.'''


class FormatError(CbnError):
    '''
    A dataset or checkpoint file is malformed.

    Args:
        path: File being parsed.
        offset: Byte offset where parsing failed.
        message: What was wrong.
    '''

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: {message} (at byte offset {offset})")
