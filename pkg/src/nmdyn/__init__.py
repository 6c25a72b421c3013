"""Non-Markovian open quantum system dynamics."""
__version__ = "0.1.0"
