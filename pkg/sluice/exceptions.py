class SluiceError(Exception):
    pass


class ConfigurationError(SluiceError):
    pass


class MaskError(SluiceError):
    pass


class NonFiniteError(SluiceError):
    pass


class TrainingError(SluiceError):
    pass


class StaleCacheError(SluiceError):
    pass


class DatasetError(SluiceError):
    pass


class StageError(SluiceError):
    pass
