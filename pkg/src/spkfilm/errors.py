"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to so the command layer can
turn any library failure into the documented exit status.
"""


class SpkFilmError(Exception):
    exit_code = 2


class ConfigError(SpkFilmError):
    exit_code = 1


class DataError(SpkFilmError):
    exit_code = 2


class FormatError(DataError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class TooShortError(DataError):
    pass


class SampleRateError(DataError):
    pass


class DegenerateInterfererError(DataError):
    pass


class InsufficientSpeakersError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateEmbeddingError(DataError):
    pass


class LabelError(DataError):
    pass


class ShapeError(SpkFilmError):
    pass


class StateError(SpkFilmError):
    pass


class ConditioningError(SpkFilmError):
    pass


class NumericalCheckError(SpkFilmError):
    exit_code = 3
