class StyleAMError(Exception):
    pass


class ConfigError(StyleAMError, ValueError):
    """Invalid configuration value or incompatible model settings."""


class InputShapeError(StyleAMError, ValueError):
    pass


class InputError(StyleAMError, ValueError):
    """Invalid data passed to an operation (out-of-range value, empty batch, bad file row)."""


class UndefinedMetricError(StyleAMError, ValueError):
    pass
