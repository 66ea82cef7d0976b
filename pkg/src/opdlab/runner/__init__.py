"""Configuration, persistence and the ``opdlab`` command line."""
