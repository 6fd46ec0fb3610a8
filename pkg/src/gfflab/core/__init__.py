"""Core infrastructure: configuration, database, logging, errors, RNG streams."""
