class ConfigError(ValueError):
    """Invalid configuration value (bad sizes, negative alpha, empty band...)."""
